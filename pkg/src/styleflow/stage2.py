"""Stage 2: train backbone + SAM + TTE with BCE while StyleGRU stays frozen."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneConfig, ReferenceBackbone, check_content_feature, clip_to_tensor
from .contrastive import clip_input
from .errors import InsufficientDataError, NonFiniteLossError, RangeError
from .flow import Band
from .fusion import FusionConfig, FusionHead
from .latents import CLIP_LENGTH, FaceClip, Label
from .stylegru import StyleGRU

log = logging.getLogger(__name__)


@dataclass
class CutoutConfig:
    count: int = 1
    min_area: float = 0.2
    max_area: float = 0.8

    def __post_init__(self):
        if self.count < 0:
            raise RangeError("count", "must be >= 0")
        if not 0 < self.min_area <= self.max_area < 1:
            raise RangeError("min_area", "area fractions must satisfy 0 < min_area <= max_area < 1")


@dataclass
class Stage2Config:
    batch_size: int = 16
    weight_decay: float = 1e-4
    momentum: float = 0.9
    warmup_epochs: float = 10
    lr_start: float = 0.01
    lr_peak: float = 0.1
    total_epochs: int = 100
    finetune: bool = False
    finetune_lr: float = 5e-7
    clip_length: int = CLIP_LENGTH
    seed: int = 0
    cutout: CutoutConfig = field(default_factory=CutoutConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self):
        if not 0 < self.lr_start < self.lr_peak:
            raise RangeError("lr_start", "must satisfy 0 < lr_start < lr_peak")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise RangeError("warmup_epochs", "must lie in [0, total_epochs)")
        for key in ("weight_decay", "momentum", "finetune_lr"):
            if getattr(self, key) < 0:
                raise RangeError(key, "must be >= 0")
        if self.batch_size < 1:
            raise RangeError("batch_size", "must be >= 1")


def lr_at(epoch: float, config: Stage2Config) -> float:
    """Linear warmup lr_start -> lr_peak, then cosine decay to zero at total_epochs."""
    if config.finetune:
        return config.finetune_lr
    epoch = min(max(epoch, 0.0), config.total_epochs)
    w = config.warmup_epochs
    if epoch < w:
        return config.lr_start + (config.lr_peak - config.lr_start) * epoch / w
    progress = (epoch - w) / (config.total_epochs - w)
    return config.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def cutout_square_side(fraction: float, height: int, width: int) -> int:
    return min(int(round(math.sqrt(fraction * height * width))), height, width)


def cutout_augment(clip: FaceClip, config: CutoutConfig, rng: np.random.Generator) -> FaceClip:
    """Zero ``count`` squares whose area is a uniform fraction of the frame; same placement on every frame."""
    if config.count == 0:
        return clip
    faces = clip.faces224.copy()
    h, w = faces.shape[1:3]
    for _ in range(config.count):
        frac = rng.uniform(config.min_area, config.max_area)
        side = cutout_square_side(frac, h, w)
        y = int(rng.integers(0, h - side + 1))
        x = int(rng.integers(0, w - side + 1))
        faces[:, y:y + side, x:x + side] = 0
    return FaceClip(clip.faces256, faces, clip.alignment_meta, clip.label, clip.source_id)


class StyleFlowDetector(nn.Module):
    """Content backbone + frozen StyleGRU + fusion head."""

    def __init__(self, stylegru: StyleGRU, backbone: nn.Module, head: FusionHead, band: str = "total",
                 difference: bool = True):
        super().__init__()
        self.stylegru = stylegru
        self.backbone = backbone
        self.head = head
        self.band = band
        self.difference = difference
        self.freeze_stylegru()

    def freeze_stylegru(self):
        self.stylegru.requires_grad_(False)
        self.stylegru.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        self.stylegru.eval()
        return self

    def style_embedding(self, style_input):
        with torch.no_grad():
            return self.stylegru(style_input)

    def forward(self, pixels, style_input):
        """pixels (N, 3, T, H, W); style_input (N, T', levels, 512). Returns (logits, info)."""
        content = check_content_feature(self.backbone(pixels))
        emb = self.style_embedding(style_input)
        logits, info = self.head(emb, content)
        info["embedding"] = emb
        return logits, info

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if p.requires_grad and not n.startswith("stylegru.")]


def build_detector(stylegru: StyleGRU, config: Stage2Config, band="total", difference=True) -> StyleFlowDetector:
    gcfg = stylegru.config
    fcfg = FusionConfig(**{
        **config.fusion.to_dict(),
        "style_dim": gcfg.hidden_size,
        "style_tokens": gcfg.num_directions * gcfg.num_layers,
        "content_dim": config.backbone.out_channels,
    })
    return StyleFlowDetector(stylegru, ReferenceBackbone(config.backbone), FusionHead(fcfg), band, difference)


def style_window(latents: np.ndarray, start: int, length: int, band="total", difference=True) -> np.ndarray:
    lv = Band(band).levels
    lat = latents[start:start + length, lv.start:lv.stop]
    return clip_input(lat, difference)


def make_batch(dataset, items, model: StyleFlowDetector, clip_length, cutout=None, rng=None):
    """items: list of (VideoRecord, start). Returns pixel tensor, style tensor, label tensor."""
    pix, sty, lab = [], [], []
    for rec, start in items:
        clip = dataset.face_clip(rec, start, clip_length)
        if cutout is not None:
            clip = cutout_augment(clip, cutout, rng)
        pix.append(clip_to_tensor(clip.faces224))
        lat = dataset.latents(rec.id).latents
        sty.append(torch.from_numpy(style_window(lat, start, clip_length, model.band, model.difference)))
        lab.append(float(rec.label == Label.FAKE))
    return torch.stack(pix), torch.stack(sty), torch.tensor(lab)


def param_digest(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def train_stage2(dataset, stylegru: StyleGRU, config: Stage2Config, band="total", difference=True,
                 model: StyleFlowDetector | None = None):
    """BCE training of everything except StyleGRU (SGD + momentum, warmup/cosine lr, cutout).

    ``dataset`` is a VideoDataset restricted to the training videos.
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = model or build_detector(stylegru, config, band, difference)
    frozen_before = param_digest(model.stylegru)
    # no optimizer state, and so no weight decay, ever touches StyleGRU
    opt = torch.optim.SGD(model.trainable_parameters(), lr=lr_at(0, config),
                          momentum=config.momentum, weight_decay=config.weight_decay)

    records = [r for r in dataset.videos if r.frames >= config.clip_length and r.label != Label.UNLABELED]
    if not records:
        raise InsufficientDataError("no labelled training videos long enough for one clip")
    n_batches = math.ceil(len(records) / config.batch_size)
    history = []
    for epoch in range(config.total_epochs):
        model.train()
        order = rng.permutation(len(records))
        total, correct = 0.0, 0
        for b in range(n_batches):
            lr = lr_at(epoch + b / n_batches, config)
            for g in opt.param_groups:
                g["lr"] = lr
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            items = [(records[i], int(rng.integers(0, records[i].frames - config.clip_length + 1))) for i in idx]
            pixels, style, y = make_batch(dataset, items, model, config.clip_length, config.cutout, rng)
            logits, _ = model(pixels, style)
            loss = F.binary_cross_entropy_with_logits(logits, y)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"stage 2 loss became non-finite at epoch {epoch} batch {b} (lr={lr})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int(((logits > 0).float() == y).sum())
        entry = {"epoch": epoch, "loss": total / len(records), "accuracy": correct / len(records),
                 "lr": lr_at(epoch, config)}
        history.append(entry)
        log.info("stage2 epoch", extra={"kv": entry})

    if param_digest(model.stylegru) != frozen_before:
        raise RuntimeError("StyleGRU weights changed during stage 2")
    model.eval()
    return model, history
