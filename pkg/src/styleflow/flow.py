"""Style flow (frame-to-frame latent differences) and per-level variance statistics."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import EmptySetError, ShapeError, TooShortError
from .latents import NUM_CHANNELS, NUM_LEVELS, Label, StyleLatentSequence


class Band(enum.Enum):
    COARSE = "coarse"
    MIDDLE = "middle"
    FINE = "fine"
    TOTAL = "total"

    @property
    def levels(self) -> range:
        return _BAND_LEVELS[self]


_BAND_LEVELS = {
    Band.COARSE: range(0, 3),
    Band.MIDDLE: range(3, 7),
    Band.FINE: range(7, 18),
    Band.TOTAL: range(0, NUM_LEVELS),
}


@dataclass(frozen=True)
class StyleFlow:
    flow: np.ndarray  # (l - 1, levels, 512)
    source_id: str = ""
    label: Label = Label.UNLABELED

    def __post_init__(self):
        if self.flow.ndim != 3 or self.flow.shape[2] != NUM_CHANNELS:
            raise ShapeError(f"flow must be (t, levels, {NUM_CHANNELS}), got {self.flow.shape}")

    def __len__(self):
        return len(self.flow)


def compute_style_flow(seq: StyleLatentSequence) -> StyleFlow:
    if len(seq) < 2:
        raise TooShortError(f"need at least 2 frames for a style flow, got {len(seq)}")
    return StyleFlow(np.diff(seq.latents, axis=0), seq.source_id, seq.label)


def first_clip_flow(seq: StyleLatentSequence, clip_length: int) -> StyleFlow:
    """Flow of the first clip of a video, used for dataset-level variance analysis."""
    return compute_style_flow(seq.window(0, clip_length))


def slice_levels(x, band: Band):
    band = Band(band)
    if band is Band.TOTAL:
        return x
    lv = slice(band.levels.start, band.levels.stop)
    if isinstance(x, StyleFlow):
        return StyleFlow(x.flow[:, lv], x.source_id, x.label)
    if isinstance(x, StyleLatentSequence):
        return StyleLatentSequence(x.latents[:, lv], x.source_id, x.label)
    if isinstance(x, np.ndarray) and x.ndim == 3:
        return x[:, lv]
    raise TypeError(f"cannot slice levels of {type(x).__name__}")


@dataclass(frozen=True)
class VarianceProfile:
    per_level_variance: np.ndarray
    clip_count: int
    class_label: Label = Label.UNLABELED


class _LevelMoments:
    """Per-level (count, mean, M2) with Chan's pairwise merge, so accumulation order doesn't matter."""

    def __init__(self, n_levels):
        self.count = 0
        self.mean = np.zeros(n_levels)
        self.m2 = np.zeros(n_levels)

    def add(self, values):
        # values: (levels, k) float64
        n_b = values.shape[1]
        mean_b = values.mean(axis=1)
        m2_b = ((values - mean_b[:, None]) ** 2).sum(axis=1)
        n_a = self.count
        n = n_a + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / n)
        self.m2 = self.m2 + m2_b + delta**2 * (n_a * n_b / n)
        self.count = n

    def variance(self):
        return self.m2 / self.count


def level_variance_profile(flows: Iterable[StyleFlow], mode: str = "pooled", class_label=None) -> VarianceProfile:
    """Population variance of flow entries per level.

    ``pooled`` pools every (clip, frame, channel) entry of a level; ``per_clip``
    takes each clip's per-level variance and averages over clips.
    """
    flows = list(flows)
    if not flows:
        raise EmptySetError("no flows given")
    shape = flows[0].flow.shape
    if any(f.flow.shape != shape for f in flows):
        raise ShapeError("flows must share one shape")
    n_levels = shape[1]

    if mode == "pooled":
        acc = _LevelMoments(n_levels)
        for f in flows:
            acc.add(np.asarray(f.flow, dtype=np.float64).transpose(1, 0, 2).reshape(n_levels, -1))
        var = acc.variance()
    elif mode == "per_clip":
        var = np.mean([np.asarray(f.flow, dtype=np.float64).var(axis=(0, 2)) for f in flows], axis=0)
    else:
        raise ValueError(f"unknown variance mode {mode!r}")

    if class_label is None:
        labels = {f.label for f in flows}
        class_label = labels.pop() if len(labels) == 1 else Label.UNLABELED
    return VarianceProfile(np.maximum(var, 0.0), len(flows), Label.parse(class_label))
