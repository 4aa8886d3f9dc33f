"""Stage 1: triplet sampling over style-flow clips and StyleGRU training (triplet hinge + BCE)."""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InsufficientDataError, NonFiniteLossError, RangeError
from .flow import Band
from .latents import CLIP_LENGTH, NUM_CHANNELS, Label, StyleLatentSequence, clip_starts
from .stylegru import StyleGRU, StyleGRUConfig

log = logging.getLogger(__name__)


class SamplingMode(enum.Enum):
    SUPERVISED = "supervised"
    SELF_SUPERVISED = "self_supervised"


@dataclass
class Stage1Config:
    margin: float = 1.0
    lambda_cls: float = 1.0
    batch_size: int = 256
    sample_count: int = 50_000
    epochs: int = 100
    learning_rate: float = 5e-4
    sampling_mode: str = "supervised"
    window_stride: int = 8
    clip_length: int = CLIP_LENGTH
    band: str = "total"
    difference: bool = True
    seed: int = 0
    model: StyleGRUConfig = field(default_factory=StyleGRUConfig)

    def __post_init__(self):
        if self.margin < 0:
            raise RangeError("margin", "must be >= 0")
        if self.lambda_cls < 0:
            raise RangeError("lambda_cls", "must be >= 0")
        for key in ("batch_size", "sample_count", "window_stride"):
            if getattr(self, key) < 1:
                raise RangeError(key, "must be >= 1")
        if self.clip_length < 2:
            raise RangeError("clip_length", "must be >= 2")
        if self.epochs < 0:
            raise RangeError("epochs", "must be >= 0")
        if self.sampling_mode not in {m.value for m in SamplingMode}:
            raise RangeError("sampling_mode", f"must be one of {[m.value for m in SamplingMode]}")
        if self.band not in {b.value for b in Band}:
            raise RangeError("band", f"must be one of {[b.value for b in Band]}")


def clip_input(latents: np.ndarray, difference: bool = True) -> np.ndarray:
    """Per-clip GRU input: the style flow, or the raw latents when differencing is ablated."""
    return np.diff(latents, axis=0) if difference else latents


def anchor_starts(n_frames: int, clip_length: int, stride: int) -> list[int]:
    return clip_starts(n_frames, clip_length, stride)


@dataclass
class TripletBatch:
    anchor: np.ndarray  # (N, T, levels, 512)
    positive: np.ndarray
    negative: np.ndarray
    labels: np.ndarray  # (N, 3): anchor, positive, negative
    sources: np.ndarray  # (N, 3) video indices

    def __len__(self):
        return len(self.anchor)


class TripletSampler:
    """Anchors walk a shuffled list of sliding windows; positives and negatives are drawn per anchor."""

    def __init__(self, sequences: Sequence[StyleLatentSequence], config: Stage1Config, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        self.mode = SamplingMode(config.sampling_mode)
        band = Band(config.band)
        lv = slice(band.levels.start, band.levels.stop)
        l = config.clip_length

        self.latents = []
        self.labels = []
        for seq in sequences:
            if len(seq) < l:
                continue
            self.latents.append(np.asarray(seq.latents[:, lv], dtype=np.float32))
            self.labels.append(Label.parse(seq.label))
        self.pools = {
            lab: [i for i, x in enumerate(self.labels) if x == lab] for lab in (Label.REAL, Label.FAKE)
        }
        if self.mode is SamplingMode.SUPERVISED:
            empty = [lab.name for lab, pool in self.pools.items() if not pool]
            if empty:
                raise InsufficientDataError(f"no usable videos labelled {', '.join(empty)}")
        elif len(self.latents) < 2:
            raise InsufficientDataError("self-supervised sampling needs at least two videos")

        self.anchors = [
            (v, s)
            for v, lat in enumerate(self.latents)
            for s in anchor_starts(len(lat), l, config.window_stride)
        ]
        self._queue: list[int] = []

    def _window(self, video, start):
        lat = self.latents[video][start:start + self.config.clip_length]
        return clip_input(lat, self.config.difference)

    def _random_start(self, video):
        return int(self.rng.integers(0, len(self.latents[video]) - self.config.clip_length + 1))

    def _sliding_start(self, video):
        grid = anchor_starts(len(self.latents[video]), self.config.clip_length, self.config.window_stride)
        return int(grid[self.rng.integers(len(grid))])

    def _next_anchor(self):
        if not self._queue:
            self._queue = self.rng.permutation(len(self.anchors)).tolist()
        return self.anchors[self._queue.pop()]

    def sample_one(self):
        a_vid, a_start = self._next_anchor()
        a_lab = self.labels[a_vid]
        if self.mode is SamplingMode.SUPERVISED:
            pos_pool = self.pools[a_lab]
            neg_pool = self.pools[Label.FAKE if a_lab == Label.REAL else Label.REAL]
            p_vid = int(pos_pool[self.rng.integers(len(pos_pool))])
        else:
            p_vid = a_vid
            neg_pool = [i for i in range(len(self.latents)) if i != a_vid]
        p_start = self._random_start(p_vid)
        n_vid = int(neg_pool[self.rng.integers(len(neg_pool))])
        # fair coin between the two window strategies
        n_start = self._sliding_start(n_vid) if self.rng.random() < 0.5 else self._random_start(n_vid)
        return (a_vid, a_start), (p_vid, p_start), (n_vid, n_start)

    def sample(self, batch_size: int) -> TripletBatch:
        members = [self.sample_one() for _ in range(batch_size)]
        stack = lambda k: np.stack([self._window(*m[k]) for m in members])
        vids = np.array([[m[k][0] for k in range(3)] for m in members])
        labels = np.array([[int(self.labels[v]) for v in row] for row in vids])
        return TripletBatch(stack(0), stack(1), stack(2), labels, vids)


def sample_triplet(sequences, config: Stage1Config, rng: np.random.Generator, batch_size: int | None = None) -> TripletBatch:
    return TripletSampler(sequences, config, rng).sample(batch_size or config.batch_size)


def triplet_loss(e_a, e_p, e_n, margin: float = 1.0, reduction: str = "mean"):
    """max(|a - p|^2 - |a - n|^2 + margin, 0) on the last axis.

    relu gives a zero subgradient at the hinge.
    """
    e_a, e_p, e_n = (torch.as_tensor(x) for x in (e_a, e_p, e_n))
    d_ap = ((e_a - e_p) ** 2).sum(-1)
    d_an = ((e_a - e_n) ** 2).sum(-1)
    loss = torch.relu(d_ap - d_an + margin)
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    return loss


def stage1_total_loss(l_tri, l_cls, lam: float = 1.0):
    return l_tri + lam * l_cls


def build_stylegru(config: Stage1Config) -> StyleGRU:
    n_levels = len(Band(config.band).levels)
    model_cfg = StyleGRUConfig(**{**config.model.to_dict(), "input_dim": n_levels * NUM_CHANNELS})
    return StyleGRU(model_cfg)


def train_stage1(sequences: Sequence[StyleLatentSequence], config: Stage1Config, model: StyleGRU | None = None):
    """Train StyleGRU with L = L_tri + lambda * L_cls under Adam.

    Returns the trained model and a per-epoch log of mean l_tri, l_cls, loss and aux accuracy.
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    sampler = TripletSampler(sequences, config, rng)
    model = model or build_stylegru(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    n_batches = max(1, math.ceil(config.sample_count / config.batch_size))

    history = []
    for epoch in range(config.epochs):
        model.train()
        sums = np.zeros(3)
        correct = seen = 0
        for b in range(n_batches):
            bs = min(config.batch_size, config.sample_count - b * config.batch_size) or config.batch_size
            batch = sampler.sample(bs)
            x = torch.from_numpy(np.concatenate([batch.anchor, batch.positive, batch.negative]))
            y = torch.from_numpy(batch.labels.T.reshape(-1).astype(np.float32))
            emb = model.embed(x)
            e_a, e_p, e_n = emb.split(bs)
            l_tri = triplet_loss(e_a, e_p, e_n, config.margin)
            logits = model.aux(emb)
            l_cls = F.binary_cross_entropy_with_logits(logits, y)
            loss = stage1_total_loss(l_tri, l_cls, config.lambda_cls)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"stage 1 loss became non-finite at epoch {epoch} batch {b}: "
                    f"l_tri={l_tri.item()}, l_cls={l_cls.item()}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += (l_tri.item(), l_cls.item(), loss.item())
            correct += int(((logits > 0).float() == y).sum())
            seen += len(y)
        mean = sums / n_batches
        entry = {
            "epoch": epoch,
            "l_tri": float(mean[0]),
            "l_cls": float(mean[1]),
            "loss": float(mean[2]),
            "accuracy": correct / seen,
        }
        history.append(entry)
        log.info("stage1 epoch", extra={"kv": entry})
    model.eval()
    return model, history
