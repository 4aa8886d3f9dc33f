"""Synthetic videos with a controllable style-flow variance gap, and the on-disk dataset layout.

Layout of a dataset directory::

    index.json          spec echo + one record per video (id, label, frames, split)
    latents/<id>.slf    latent cache files
    pixels/<id>.npy     low-resolution uint8 frames (frames, r, r, 3), upsampled on load
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import RangeError
from .flow import Band
from .latents import (
    CONTENT_CROP,
    NUM_CHANNELS,
    NUM_LEVELS,
    FaceClip,
    Label,
    LatentCache,
    StyleLatentSequence,
    encoder_fingerprint,
)


def _default_profile():
    return tuple(float(v) for v in np.round(np.linspace(1.0, 0.4, NUM_LEVELS), 6))


@dataclass
class SyntheticSpec:
    videos_per_class: int = 100
    frames: int = 40
    base_variance: tuple = field(default_factory=_default_profile)
    suppressed_band: str = "fine"
    gamma: float = 0.5
    content_artifact: bool = False
    flicker_amplitude: float = 12.0
    pixel_resolution: int = 28
    test_fraction: float = 0.5
    latent_rank: int = 0
    seed: int = 0

    def __post_init__(self):
        self.base_variance = tuple(float(v) for v in self.base_variance)
        if not 0 < self.gamma <= 1:
            raise RangeError("gamma", "must lie in (0, 1]")
        if len(self.base_variance) != NUM_LEVELS or min(self.base_variance) <= 0:
            raise RangeError("base_variance", f"needs {NUM_LEVELS} positive entries")
        if self.pixel_resolution < 1 or CONTENT_CROP % self.pixel_resolution:
            raise RangeError("pixel_resolution", f"must divide {CONTENT_CROP}")
        if self.frames < 2:
            raise RangeError("frames", "must be >= 2")
        if self.videos_per_class < 1:
            raise RangeError("videos_per_class", "must be >= 1")
        if not 0 <= self.latent_rank <= NUM_CHANNELS:
            raise RangeError("latent_rank", f"must lie in [0, {NUM_CHANNELS}] (0 = independent channels)")
        if not 0 <= self.test_fraction <= 1:
            raise RangeError("test_fraction", "must lie in [0, 1]")
        if self.suppressed_band not in {b.value for b in Band}:
            raise RangeError("suppressed_band", f"must be one of {[b.value for b in Band]}")

    def level_scale(self, label: Label) -> np.ndarray:
        """Per-level standard deviation of one flow step."""
        std = np.sqrt(np.asarray(self.base_variance))
        if label == Label.FAKE:
            std = std.copy()
            lv = Band(self.suppressed_band).levels
            std[lv.start:lv.stop] *= self.gamma
        return std


def _video_rng(seed, label, index):
    return np.random.default_rng([seed, int(label), index])


def channel_basis(spec: SyntheticSpec) -> np.ndarray | None:
    """Per-level orthonormal bases (levels, rank, 512) scaled so each channel keeps unit mean variance.

    Shared by every video generated from one seed. Returns None for independent channels.
    """
    if spec.latent_rank == 0:
        return None
    rng = np.random.default_rng([spec.seed, 7])
    g = rng.standard_normal((NUM_LEVELS, NUM_CHANNELS, spec.latent_rank))
    q, _ = np.linalg.qr(g)
    return np.sqrt(NUM_CHANNELS / spec.latent_rank) * q.transpose(0, 2, 1)


def synth_latents(spec: SyntheticSpec, label: Label, index: int, basis: np.ndarray | None = None) -> np.ndarray:
    """Gaussian random walk over frames; fakes have their suppressed-band steps scaled by gamma.

    With ``latent_rank > 0`` each step lives in a shared low-rank channel subspace per level.
    """
    rng = _video_rng(spec.seed, label, index)
    start = rng.standard_normal((NUM_LEVELS, NUM_CHANNELS))
    if basis is None:
        basis = channel_basis(spec)
    if basis is None:
        steps = rng.standard_normal((spec.frames - 1, NUM_LEVELS, NUM_CHANNELS))
    else:
        z = rng.standard_normal((spec.frames - 1, NUM_LEVELS, spec.latent_rank))
        steps = np.einsum("tlk,lkc->tlc", z, basis)
    steps *= spec.level_scale(label)[None, :, None]
    walk = np.concatenate([start[None], start[None] + np.cumsum(steps, axis=0)])
    return walk.astype(np.float32)


def synth_pixels(spec: SyntheticSpec, label: Label, index: int) -> np.ndarray:
    """Low-resolution Gaussian textures drawn independently per frame; optional alternating flicker on fakes.

    Nothing in the pixels identifies a video, so without the flicker the content path carries no label cue.
    """
    rng = np.random.default_rng([spec.seed, int(label), index, 1])
    r = spec.pixel_resolution
    frames = 128.0 + 40.0 * rng.standard_normal((spec.frames, r, r, 3))
    if spec.content_artifact and label == Label.FAKE:
        sign = np.where(np.arange(spec.frames) % 2 == 0, 1.0, -1.0)
        frames += spec.flicker_amplitude * sign[:, None, None, None]
    return np.clip(np.rint(frames), 0, 255).astype(np.uint8)


def upsample(frames: np.ndarray, size: int = CONTENT_CROP) -> np.ndarray:
    k = size // frames.shape[1]
    return np.repeat(np.repeat(frames, k, axis=1), k, axis=2)


def video_ids(spec: SyntheticSpec):
    for label in (Label.REAL, Label.FAKE):
        for i in range(spec.videos_per_class):
            yield f"{label.name.lower()}_{i:04d}", label, i


def assign_splits(spec: SyntheticSpec) -> dict[str, str]:
    rng = np.random.default_rng([spec.seed, 99])
    splits = {}
    n_test = int(round(spec.test_fraction * spec.videos_per_class))
    for label in (Label.REAL, Label.FAKE):
        order = rng.permutation(spec.videos_per_class)
        test = set(order[:n_test].tolist())
        for i in range(spec.videos_per_class):
            splits[f"{label.name.lower()}_{i:04d}"] = "test" if i in test else "train"
    return splits


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir, with_pixels: bool = True) -> Path:
    out = Path(out_dir)
    fingerprint = encoder_fingerprint("synthetic-random-walk", spec.seed)
    cache = LatentCache(out / "latents", fingerprint)
    (out / "pixels").mkdir(parents=True, exist_ok=True)
    splits = assign_splits(spec)
    basis = channel_basis(spec)
    records = []
    for vid, label, i in video_ids(spec):
        cache.store(StyleLatentSequence(synth_latents(spec, label, i, basis), vid, label))
        if with_pixels:
            np.save(out / "pixels" / f"{vid}.npy", synth_pixels(spec, label, i))
        records.append({"id": vid, "label": label.name, "frames": spec.frames, "split": splits[vid]})
    index = {"spec": asdict(spec), "encoder_fingerprint": fingerprint, "videos": records}
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return out


@dataclass
class VideoRecord:
    id: str
    label: Label
    frames: int
    split: str


class VideoDataset:
    """Read side of a dataset directory. Latents are memoised after the first load."""

    def __init__(self, root, split: str | None = None):
        self.root = Path(root)
        index = json.loads((self.root / "index.json").read_text())
        self.index = index
        videos = [VideoRecord(v["id"], Label.parse(v["label"]), int(v["frames"]), v.get("split", "train"))
                  for v in index["videos"]]
        if split not in (None, "all"):
            videos = [v for v in videos if v.split == split]
        self.videos = videos
        self.cache = LatentCache(self.root / "latents")
        self._latents: dict[str, StyleLatentSequence] = {}

    def __len__(self):
        return len(self.videos)

    def latents(self, vid: str) -> StyleLatentSequence:
        if vid not in self._latents:
            self._latents[vid] = self.cache.load(vid)
        return self._latents[vid]

    def sequences(self) -> list[StyleLatentSequence]:
        return [self.latents(v.id) for v in self.videos]

    def pixels(self, vid: str, start: int, length: int) -> np.ndarray:
        raw = np.load(self.root / "pixels" / f"{vid}.npy", mmap_mode="r")
        return upsample(np.asarray(raw[start:start + length]))

    def face_clip(self, record: VideoRecord, start: int, length: int) -> FaceClip:
        return FaceClip(None, self.pixels(record.id, start, length), label=record.label, source_id=record.id)
