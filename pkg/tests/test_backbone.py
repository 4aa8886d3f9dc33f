import numpy as np
import pytest
import torch

from styleflow.backbone import (
    BackboneConfig,
    ReferenceBackbone,
    check_content_feature,
    clip_to_tensor,
    extract_content_feature,
)
from styleflow.errors import ShapeError
from styleflow.latents import FaceClip


@pytest.fixture(scope="module")
def backbone():
    torch.manual_seed(0)
    return ReferenceBackbone().eval()


def test_clip_gives_1024_by_16(backbone, rng):
    faces = rng.integers(0, 256, (32, 224, 224, 3), dtype=np.uint8)
    with torch.no_grad():
        feat = extract_content_feature(FaceClip(None, faces), backbone)
    assert tuple(feat.shape) == (1024, 16)
    assert torch.isfinite(feat).all()


def test_bias_free_backbone_maps_zero_to_zero():
    model = ReferenceBackbone(BackboneConfig(bias=False)).eval()
    with torch.no_grad():
        out = model(torch.zeros(1, 3, 32, 224, 224))
    assert torch.count_nonzero(out) == 0


def test_time_constant_clip_gives_time_constant_tokens(backbone, rng):
    frame = rng.integers(0, 256, (1, 224, 224, 3), dtype=np.uint8)
    faces = np.repeat(frame, 32, axis=0)
    with torch.no_grad():
        feat = extract_content_feature(FaceClip(None, faces), backbone)
    torch.testing.assert_close(feat, feat[:, :1].expand_as(feat), rtol=0, atol=1e-5)


def test_spatially_uniform_frames_ignore_pixel_permutation(backbone, rng):
    colors = rng.integers(0, 256, (32, 1, 1, 3), dtype=np.uint8)
    faces = np.broadcast_to(colors, (32, 224, 224, 3)).copy()
    perm = rng.permutation(224 * 224)
    shuffled = faces.reshape(32, -1, 3)[:, perm].reshape(faces.shape)
    with torch.no_grad():
        a = extract_content_feature(FaceClip(None, faces), backbone)
        b = extract_content_feature(FaceClip(None, shuffled), backbone)
    assert torch.equal(a, b)


def test_eval_is_deterministic(backbone, rng):
    x = clip_to_tensor(rng.integers(0, 256, (32, 224, 224, 3), dtype=np.uint8))[None]
    with torch.no_grad():
        assert torch.equal(backbone(x), backbone(x))


def test_contract_violations_raise():
    with pytest.raises(ShapeError):
        check_content_feature(torch.zeros(1, 512, 16))
    with pytest.raises(ShapeError):
        extract_content_feature(FaceClip(None, np.zeros((32, 112, 112, 3), np.uint8)), ReferenceBackbone())


def test_clip_to_tensor_layout():
    frames = np.zeros((2, 4, 4, 3), np.uint8)
    frames[1, 2, 3, 0] = 255
    x = clip_to_tensor(frames)
    assert x.shape == (3, 2, 4, 4)
    assert x[0, 1, 2, 3].item() == pytest.approx(2.0)
    assert x[1, 0, 0, 0].item() == pytest.approx(-2.0)
