"""Clip -> video aggregation, video-level AUC, perturbation harness and embedding export."""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass

import cv2
import numpy as np
import torch
from scipy.stats import rankdata

from .backbone import clip_to_tensor
from .errors import EmptySetError, SingleClassError, UnknownPerturbationError
from .fusion import sam_response
from .latents import FaceClip, Label, clip_starts
from .stage2 import StyleFlowDetector, style_window


# ---- aggregation and AUC ----------------------------------------------------

def aggregate_clip_scores(scores, method: str = "mean") -> float:
    scores = np.asarray(list(scores), dtype=np.float64)
    if scores.size == 0:
        raise EmptySetError("no clip scores to aggregate")
    if method == "mean":
        return float(scores.mean())
    if method == "median":
        return float(np.median(scores))
    if method == "max":
        return float(scores.max())
    raise ValueError(f"unknown aggregation {method!r}")


def video_auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney statistic: P(fake > real) with ties counted 1/2. Label 1 = fake."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray([int(Label.parse(v)) for v in labels])
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUC needs both real and fake videos")
    keep = (y == 0) | (y == 1)
    ranks = rankdata(s[keep])  # midranks resolve ties
    pos_rank_sum = ranks[y[keep] == 1].sum()
    u = pos_rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---- perturbations ----------------------------------------------------------

class PerturbationKind(enum.Enum):
    SATURATION = "saturation"
    CONTRAST = "contrast"
    BLOCK = "block"
    NOISE = "noise"
    BLUR = "blur"
    PIXEL = "pixel"
    COMPRESS = "compress"


# severity 1..5; index 0 is unused (severity 0 is the identity)
SCHEDULES = {
    PerturbationKind.SATURATION: (None, 0.9, 0.8, 0.7, 0.6, 0.5),
    PerturbationKind.CONTRAST: (None, 1.1, 1.2, 1.3, 1.4, 1.5),
    PerturbationKind.BLOCK: (None, 2, 4, 6, 8, 10),
    PerturbationKind.NOISE: (None, 5 / 255, 10 / 255, 15 / 255, 20 / 255, 25 / 255),
    PerturbationKind.BLUR: (None, 3, 5, 7, 9, 11),
    PerturbationKind.PIXEL: (None, 2, 3, 4, 5, 6),
    PerturbationKind.COMPRESS: (None, 90, 70, 50, 30, 10),
}
BLOCK_FRACTION = 0.125  # occluder side relative to the frame side


@dataclass(frozen=True)
class PerturbationSpec:
    kind: PerturbationKind
    severity: int

    @classmethod
    def parse(cls, text: str) -> "PerturbationSpec":
        """'noise:3' -> PerturbationSpec(NOISE, 3)."""
        name, _, sev = text.partition(":")
        try:
            kind = PerturbationKind(name.strip().lower())
        except ValueError as exc:
            raise UnknownPerturbationError(f"unknown perturbation {name!r}") from exc
        return cls(kind, int(sev or 1))

    def __post_init__(self):
        if not isinstance(self.kind, PerturbationKind):
            raise UnknownPerturbationError(f"unknown perturbation {self.kind!r}")
        if not 0 <= self.severity <= 5:
            raise ValueError("severity must be in 0..5")

    @property
    def parameter(self):
        return None if self.severity == 0 else SCHEDULES[self.kind][self.severity]


def _perturb_frames(frames: np.ndarray, spec: PerturbationSpec, rng: np.random.Generator) -> np.ndarray:
    p = spec.parameter
    kind = spec.kind
    x = frames.astype(np.float32)
    if kind is PerturbationKind.NOISE:
        x = x + rng.normal(0.0, p * 255.0, size=x.shape)
    elif kind is PerturbationKind.SATURATION:
        gray = (x @ np.array([0.299, 0.587, 0.114], dtype=np.float32))[..., None]
        x = gray + p * (x - gray)
    elif kind is PerturbationKind.CONTRAST:
        mean = x.mean(axis=(1, 2, 3), keepdims=True)
        x = mean + p * (x - mean)
    elif kind is PerturbationKind.BLUR:
        return np.stack([cv2.blur(f, (p, p), borderType=cv2.BORDER_REFLECT) for f in frames])
    elif kind is PerturbationKind.PIXEL:
        h, w = frames.shape[1:3]
        small = (max(1, w // p), max(1, h // p))
        return np.stack([
            cv2.resize(cv2.resize(f, small, interpolation=cv2.INTER_AREA), (w, h), interpolation=cv2.INTER_NEAREST)
            for f in frames
        ])
    elif kind is PerturbationKind.COMPRESS:
        out = []
        for f in frames:
            ok, buf = cv2.imencode(".jpg", cv2.cvtColor(f, cv2.COLOR_RGB2BGR), [cv2.IMWRITE_JPEG_QUALITY, p])
            out.append(cv2.cvtColor(cv2.imdecode(buf, cv2.IMREAD_COLOR), cv2.COLOR_BGR2RGB))
        return np.stack(out)
    elif kind is PerturbationKind.BLOCK:
        h, w = frames.shape[1:3]
        side = max(1, int(round(BLOCK_FRACTION * min(h, w))))
        out = frames.copy()
        for _ in range(p):
            y = int(rng.integers(0, h - side + 1))
            xx = int(rng.integers(0, w - side + 1))
            out[:, y:y + side, xx:xx + side] = 0
        return out
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def apply_perturbation(clip: FaceClip, spec: PerturbationSpec, rng: np.random.Generator) -> FaceClip:
    """Perturb the content-path frames; severity 0 returns the clip untouched."""
    if spec.severity == 0:
        return clip
    faces = _perturb_frames(clip.faces224, spec, rng)
    return FaceClip(clip.faces256, faces, clip.alignment_meta, clip.label, clip.source_id)


# ---- scoring ----------------------------------------------------------------

@dataclass
class DetectionScore:
    source_id: str
    label: Label
    clip_scores: list
    video_score: float


@torch.no_grad()
def score_dataset(model: StyleFlowDetector, dataset, clip_length=32, clip_stride=None, aggregate="mean",
                  perturbation: PerturbationSpec | None = None, seed: int = 0, batch_size: int = 16,
                  collect=False):
    """Score every clip of every video. Returns DetectionScores and, with ``collect``,
    per-clip rows (clip_id, label, score, sam_response, features)."""
    model.eval()
    rng = np.random.default_rng(seed)
    items = [(rec, s) for rec in dataset.videos for s in clip_starts(rec.frames, clip_length, clip_stride)]
    clip_rows = []
    for i in range(0, len(items), batch_size):
        chunk = items[i:i + batch_size]
        pix, sty = [], []
        for rec, start in chunk:
            clip = dataset.face_clip(rec, start, clip_length)
            if perturbation is not None:
                clip = apply_perturbation(clip, perturbation, rng)
            pix.append(clip_to_tensor(clip.faces224))
            lat = dataset.latents(rec.id).latents
            sty.append(torch.from_numpy(style_window(lat, start, clip_length, model.band, model.difference)))
        logits, info = model(torch.stack(pix), torch.stack(sty))
        probs = torch.sigmoid(logits).double().tolist()
        if "weights" in info:
            resp = sam_response(info["weights"], info["values"]).double().tolist()
        else:
            resp = [float("nan")] * len(chunk)
        feats = info["features"].double().numpy()
        for (rec, start), p, r, f in zip(chunk, probs, resp, feats):
            clip_rows.append((rec, start, p, r, f))

    by_video: dict[str, list] = {}
    for rec, start, p, r, f in clip_rows:
        by_video.setdefault(rec.id, []).append(p)
    results = [
        DetectionScore(rec.id, rec.label, by_video[rec.id], aggregate_clip_scores(by_video[rec.id], aggregate))
        for rec in dataset.videos if rec.id in by_video
    ]
    if collect:
        rows = [(f"{rec.id}@{start}", rec.label, p, r, f) for rec, start, p, r, f in clip_rows]
        return results, rows
    return results


def evaluation_report(results, clip_level=False, config_echo=None) -> dict:
    labelled = [r for r in results if r.label != Label.UNLABELED]
    if clip_level:
        scores = [s for r in labelled for s in r.clip_scores]
        labels = [r.label for r in labelled for _ in r.clip_scores]
    else:
        scores = [r.video_score for r in labelled]
        labels = [r.label for r in labelled]
    return {
        "auc": video_auc(scores, labels),
        "per_video": [{"id": r.source_id, "label": r.label.name, "score": r.video_score} for r in results],
        "config_echo": config_echo or {},
    }


def export_embeddings(rows, path):
    """rows from score_dataset(collect=True). One CSV row per clip: clip_id, label, f0..fk."""
    rows = list(rows)
    width = len(rows[0][4]) if rows else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "label"] + [f"f{i}" for i in range(width)])
        for clip_id, label, _, _, feat in rows:
            w.writerow([clip_id, Label.parse(label).name] + [repr(float(v)) for v in feat])
    return path
