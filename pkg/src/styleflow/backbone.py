"""Content path: a small temporal-first 3D CNN producing a (1024, 16) feature per 32-frame clip."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

CONTENT_CHANNELS = 1024
CONTENT_TOKENS = 16


class ContentBackbone(Protocol):
    """(N, 3, 32, 224, 224) float clip -> (N, 1024, 16) feature."""

    def __call__(self, clip: torch.Tensor) -> torch.Tensor: ...


@dataclass
class BackboneConfig:
    widths: tuple = (16, 32, 64)
    out_channels: int = CONTENT_CHANNELS
    bias: bool = True
    variant: str = "reference-3d-v1"

    def to_dict(self):
        return asdict(self)


class TemporalConv(nn.Module):
    """k x 1 x 1 convolution with replicate padding in time, so time-constant inputs stay time-constant."""

    def __init__(self, channels, kernel=3, bias=True):
        super().__init__()
        self.pad = kernel // 2
        self.conv = nn.Conv3d(channels, channels, (kernel, 1, 1), bias=bias)

    def forward(self, x):
        x = F.pad(x, (0, 0, 0, 0, self.pad, self.pad), mode="replicate")
        return self.conv(x)


class ReferenceBackbone(nn.Module):
    """Four stages. Spatial 1x3x3 convolutions shrink 224 -> 56 -> 14 -> 7, one 2x1x1 stride-2
    convolution maps 32 frames to 16, a pointwise layer lifts to 1024 channels, then spatial GAP.
    """

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = cfg = config or BackboneConfig()
        w1, w2, w3 = cfg.widths
        b = cfg.bias
        self.stage1 = nn.Sequential(nn.Conv3d(3, w1, (1, 3, 3), (1, 4, 4), (0, 1, 1), bias=b), nn.ReLU())
        self.stage2 = nn.Sequential(
            nn.Conv3d(w1, w2, (1, 3, 3), (1, 4, 4), (0, 1, 1), bias=b), nn.ReLU(),
            TemporalConv(w2, 3, bias=b), nn.ReLU(),
        )
        self.stage3 = nn.Sequential(
            nn.Conv3d(w2, w3, (1, 3, 3), (1, 2, 2), (0, 1, 1), bias=b), nn.ReLU(),
            nn.Conv3d(w3, w3, (2, 1, 1), (2, 1, 1), bias=b), nn.ReLU(),
        )
        self.stage4 = nn.Sequential(nn.Conv3d(w3, cfg.out_channels, 1, bias=b), nn.ReLU())
        self.reset_parameters()

    def reset_parameters(self):
        # He init keeps activation scale through the ReLU stack; torch's default shrinks it
        # by roughly 6x per layer, leaving content tokens far smaller than the SAM residual
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, x):
        x = self.stage4(self.stage3(self.stage2(self.stage1(x))))
        return x.mean(dim=(3, 4))


def clip_to_tensor(frames: np.ndarray) -> torch.Tensor:
    """(l, H, W, 3) uint8 -> (3, l, H, W) float, roughly zero-mean unit-scale."""
    x = torch.from_numpy(np.ascontiguousarray(frames)).float().div_(255.0)
    x = (x - 0.5) / 0.25
    return x.permute(3, 0, 1, 2)


def check_content_feature(feat: torch.Tensor) -> torch.Tensor:
    if feat.shape[-2:] != (CONTENT_CHANNELS, CONTENT_TOKENS):
        raise ShapeError(
            f"content backbone must return (..., {CONTENT_CHANNELS}, {CONTENT_TOKENS}), got {tuple(feat.shape)}"
        )
    return feat


def extract_content_feature(clip, backbone: ContentBackbone) -> torch.Tensor:
    """FaceClip (content-path crops) -> (1024, 16) feature."""
    faces = clip.faces224
    if faces.shape[1:] != (224, 224, 3):
        raise ShapeError(f"content-path crops must be 224x224x3, got {faces.shape[1:]}")
    x = clip_to_tensor(faces).unsqueeze(0)
    return check_content_feature(backbone(x))[0]
