import numpy as np
import pytest

from styleflow.errors import (
    ClipLengthError,
    CorruptCacheError,
    DimensionMismatchError,
    EncoderFailure,
    FaceNotFoundError,
    ShapeError,
)
from styleflow.latents import (
    HEADER_SIZE,
    CenterCropDetector,
    FaceClip,
    Label,
    LatentCache,
    LatentCacheHeader,
    MockLinearEncoder,
    StyleLatentSequence,
    VideoClip,
    cache_load,
    cache_store,
    clip_starts,
    detect_and_align,
    extract_style_latents,
    read_cache_header,
)


def _video(n=32, h=300, w=400, seed=0, label=Label.REAL):
    rng = np.random.default_rng(seed)
    frames = [rng.integers(0, 256, (h, w, 3), dtype=np.uint8) for _ in range(n)]
    return VideoClip(frames, "vid", 0, label)


def test_stub_detector_gives_32_crops_of_both_sizes():
    clip = detect_and_align(_video(), CenterCropDetector())
    assert clip.faces256.shape == (32, 256, 256, 3)
    assert clip.faces224.shape == (32, 224, 224, 3)
    assert clip.faces256.dtype == np.uint8
    assert len(clip.alignment_meta) == 32
    # center square of a 300x400 frame
    assert clip.alignment_meta[0].box == (50, 0, 350, 300)


def test_alignment_is_deterministic():
    a = detect_and_align(_video(seed=3), CenterCropDetector())
    b = detect_and_align(_video(seed=3), CenterCropDetector())
    assert np.array_equal(a.faces256, b.faces256)
    assert np.array_equal(a.faces224, b.faces224)


def test_31_frames_with_clip_length_32_is_rejected():
    with pytest.raises(ClipLengthError):
        detect_and_align(_video(n=31), CenterCropDetector(), clip_length=32)


def test_ragged_frames_are_rejected():
    v = _video(n=4)
    frames = list(v.frames)
    frames[2] = frames[2][:-1]
    with pytest.raises(DimensionMismatchError):
        detect_and_align(VideoClip(frames, "vid"), CenterCropDetector(), clip_length=4)


def test_missing_face_reports_frame_index():
    class Blind:
        def detect(self, image):
            return None if image[0, 0, 0] == 7 else CenterCropDetector().detect(image)

    v = _video(n=4)
    frames = [f.copy() for f in v.frames]
    for f in frames:
        f[0, 0, 0] = 0
    frames[2][0, 0, 0] = 7
    with pytest.raises(FaceNotFoundError) as exc:
        detect_and_align(VideoClip(frames, "vid"), Blind(), clip_length=4)
    assert exc.value.frame_index == 2


def test_encoder_output_matches_per_frame_loop(rng):
    enc = MockLinearEncoder(seed=5)
    faces = rng.integers(0, 256, (3, 256, 256, 3), dtype=np.uint8)
    seq = extract_style_latents(FaceClip(faces, faces[:, :224, :224]), enc)
    assert seq.latents.shape == (3, 18, 512)
    for i in range(3):
        # independent thumbnail: mean over channels, then 32x32 block means
        gray = faces[i].astype(np.float64).mean(axis=2) / 255.0
        thumb = np.array([[gray[32 * a:32 * a + 32, 32 * b:32 * b + 32].mean() for b in range(8)] for a in range(8)])
        expect = (thumb.ravel() @ enc.weight).reshape(18, 512) + enc.level_offsets[:, None]
        np.testing.assert_allclose(seq.latents[i], expect, rtol=1e-5, atol=1e-5)


def test_encoder_failure_carries_frame_index(rng):
    class Flaky:
        def __init__(self):
            self.calls = 0

        def encode(self, image):
            self.calls += 1
            if self.calls == 3:
                raise RuntimeError("boom")
            return np.zeros((18, 512), np.float32)

    faces = rng.integers(0, 256, (4, 256, 256, 3), dtype=np.uint8)
    with pytest.raises(EncoderFailure) as exc:
        extract_style_latents(FaceClip(faces, faces[:, :224, :224]), Flaky())
    assert exc.value.frame_index == 2


def test_extract_requires_latent_crops():
    faces = np.zeros((2, 224, 224, 3), np.uint8)
    with pytest.raises(ShapeError):
        extract_style_latents(FaceClip(None, faces), MockLinearEncoder())


def test_sequence_validation():
    with pytest.raises(ShapeError):
        StyleLatentSequence(np.zeros((4, 18, 511), np.float32))
    bad = np.zeros((4, 18, 512), np.float32)
    bad[1, 2, 3] = np.nan
    with pytest.raises(ValueError):
        StyleLatentSequence(bad)


def test_clip_starts():
    assert clip_starts(64, 32) == [0, 32]
    assert clip_starts(64, 32, 8) == [0, 8, 16, 24, 32]
    assert clip_starts(31, 32) == []


def test_cache_roundtrip_is_bit_exact(tmp_path, rng):
    lat = rng.standard_normal((40, 18, 512)).astype(np.float32)
    seq = StyleLatentSequence(lat, "real_0007", Label.FAKE)
    path = cache_store(seq, tmp_path / "a.slf", fingerprint="ab" * 16)
    back = cache_load(path)
    assert back.latents.tobytes() == lat.tobytes()
    assert back.source_id == "real_0007" and back.label == Label.FAKE
    hdr = read_cache_header(path)
    assert hdr.frame_count == 40 and hdr.level_count == 18 and hdr.channel_count == 512
    assert hdr.encoder_fingerprint == "ab" * 16
    assert path.stat().st_size == HEADER_SIZE + lat.nbytes
    assert HEADER_SIZE == 64


def test_cache_header_pack_unpack():
    h = LatentCacheHeader(source_id="x", frame_count=7, label=Label.REAL,
                          encoder_fingerprint="0123456789abcdef" * 2)
    assert LatentCacheHeader.unpack(h.pack()) == h


def test_truncated_cache_is_corrupt(tmp_path, rng):
    seq = StyleLatentSequence(rng.standard_normal((5, 18, 512)).astype(np.float32), "v")
    path = cache_store(seq, tmp_path / "v.slf")
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(CorruptCacheError):
        cache_load(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CorruptCacheError):
        cache_load(path)


def test_latent_cache_directory(tmp_path, rng):
    cache = LatentCache(tmp_path / "c", "f" * 32)
    for i in range(3):
        cache.store(StyleLatentSequence(rng.standard_normal((2, 18, 512)).astype(np.float32), f"v{i}"))
    assert cache.ids() == ["v0", "v1", "v2"]
    assert cache.load("v1").source_id == "v1"
