import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from styleflow.errors import EmptySetError, ShapeError, TooShortError
from styleflow.flow import Band, StyleFlow, compute_style_flow, first_clip_flow, level_variance_profile, slice_levels
from styleflow.latents import Label, StyleLatentSequence


def loop_flow(lat):
    """Scalar triple-loop oracle for frame differences."""
    t, lv, ch = lat.shape
    out = np.empty((t - 1, lv, ch), dtype=lat.dtype)
    for i in range(t - 1):
        for j in range(lv):
            for k in range(ch):
                out[i, j, k] = lat[i + 1, j, k] - lat[i, j, k]
    return out


def test_flow_matches_loop_oracle_exactly(rng):
    lat = rng.standard_normal((5, 18, 512)).astype(np.float32)
    flow = compute_style_flow(StyleLatentSequence(lat))
    assert flow.flow.shape == (4, 18, 512)
    assert np.array_equal(flow.flow, loop_flow(lat))


def test_flow_needs_two_frames():
    with pytest.raises(TooShortError):
        compute_style_flow(StyleLatentSequence(np.zeros((1, 18, 512), np.float32)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), t=st.integers(2, 12), a=st.floats(-4, 4, allow_nan=False))
def test_flow_linearity_and_telescoping(seed, t, a):
    lat = np.random.default_rng(seed).standard_normal((t, 18, 512))
    f = compute_style_flow(StyleLatentSequence(lat)).flow
    fa = compute_style_flow(StyleLatentSequence(a * lat)).flow
    np.testing.assert_allclose(fa, a * f, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(f.sum(axis=0), lat[-1] - lat[0], rtol=1e-5, atol=1e-9)


def test_bands_partition_levels():
    levels = [lv for b in (Band.COARSE, Band.MIDDLE, Band.FINE) for lv in b.levels]
    assert levels == list(range(18))
    assert list(Band.TOTAL.levels) == list(range(18))
    x = np.zeros((3, 18, 512))
    assert slice_levels(x, Band.FINE).shape == (3, 11, 512)


def test_first_clip_flow_uses_leading_window(rng):
    lat = rng.standard_normal((40, 18, 512)).astype(np.float32)
    f = first_clip_flow(StyleLatentSequence(lat), 32)
    assert np.array_equal(f.flow, np.diff(lat[:32], axis=0))


def test_zero_flows_give_zero_profile():
    flows = [StyleFlow(np.zeros((31, 18, 512))) for _ in range(3)]
    assert np.all(level_variance_profile(flows).per_level_variance == 0)


def test_alternating_level_has_unit_variance():
    flow = np.zeros((4, 18, 512))
    flow[:, 5, :] = np.where(np.arange(4) % 2 == 0, 1.0, -1.0)[:, None]
    prof = level_variance_profile([StyleFlow(flow)]).per_level_variance
    expect = np.zeros(18)
    expect[5] = 1.0
    np.testing.assert_allclose(prof, expect, atol=1e-15)


def test_pooled_variance_matches_numpy_over_all_entries(rng):
    flows = [StyleFlow(rng.standard_normal((7, 18, 512)) * (1 + i)) for i in range(4)]
    stacked = np.stack([f.flow for f in flows])
    expect = stacked.transpose(2, 0, 1, 3).reshape(18, -1).var(axis=1)
    np.testing.assert_allclose(level_variance_profile(flows).per_level_variance, expect, rtol=1e-10)
    per_clip = np.mean([f.flow.var(axis=(0, 2)) for f in flows], axis=0)
    np.testing.assert_allclose(level_variance_profile(flows, "per_clip").per_level_variance, per_clip, rtol=1e-12)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_profile_is_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    flows = [StyleFlow(rng.standard_normal((3, 18, 512)) * rng.uniform(0.5, 2)) for _ in range(5)]
    order = rng.permutation(5)
    a = level_variance_profile(flows).per_level_variance
    b = level_variance_profile([flows[i] for i in order]).per_level_variance
    np.testing.assert_allclose(a, b, rtol=1e-10)


def test_scaling_fine_levels_by_half_quarters_variance(rng):
    real = [StyleFlow(rng.standard_normal((31, 18, 512)), label=Label.REAL) for _ in range(20)]
    scale = np.ones((18, 1))
    scale[7:] = 0.5
    fake = [StyleFlow(f.flow * scale, label=Label.FAKE) for f in real]
    ratio = level_variance_profile(fake).per_level_variance / level_variance_profile(real).per_level_variance
    np.testing.assert_allclose(ratio[7:], 0.25, atol=0.01)
    np.testing.assert_allclose(ratio[:7], 1.0, atol=1e-12)


def test_profile_errors():
    with pytest.raises(EmptySetError):
        level_variance_profile([])
    with pytest.raises(ShapeError):
        level_variance_profile([StyleFlow(np.zeros((3, 18, 512))), StyleFlow(np.zeros((4, 18, 512)))])


def test_profile_class_label():
    flows = [StyleFlow(np.ones((2, 18, 512)), label=Label.FAKE)]
    assert level_variance_profile(flows).class_label == Label.FAKE
    assert level_variance_profile(flows).clip_count == 1
