"""Style attention (content queries attend over StyleGRU slots), temporal transformer, prediction head."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .backbone import CONTENT_CHANNELS, CONTENT_TOKENS
from .errors import RangeError, ShapeError
from .stylegru import embedding_tokens


@dataclass
class FusionConfig:
    content_dim: int = CONTENT_CHANNELS
    content_tokens: int = CONTENT_TOKENS
    style_dim: int = 4096
    style_tokens: int = 4
    attn_dim: int = 1024
    value_dim: int = 1024
    tte_depth: int = 2
    tte_heads: int = 8
    tte_mlp_dim: int = 4096
    pool: str = "mean"
    use_sam: bool = True

    def __post_init__(self):
        if self.pool not in ("mean", "first"):
            raise RangeError("pool", f"must be 'mean' or 'first', got {self.pool!r}")
        if self.tte_heads < 1 or self.content_dim % self.tte_heads:
            raise RangeError("tte_heads", "must divide content_dim")

    def to_dict(self):
        return asdict(self)


class StyleAttention(nn.Module):
    """Single-head cross attention: queries from content tokens, keys/values from style slots."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        self.phi_q = nn.Linear(cfg.content_dim, cfg.attn_dim)
        self.phi_k = nn.Linear(cfg.style_dim, cfg.attn_dim)
        self.phi_v = nn.Linear(cfg.style_dim, cfg.value_dim)
        self.phi = nn.Linear(cfg.value_dim, cfg.content_dim)

    def forward(self, style_tokens, content_tokens):
        """style_tokens (N, S, style_dim), content_tokens (N, T, content_dim).

        Returns (output (N, T, content_dim), weights (N, T, S), values (N, S, value_dim)).
        """
        q = self.phi_q(content_tokens)
        k = self.phi_k(style_tokens)
        v = self.phi_v(style_tokens)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.cfg.attn_dim)
        weights = logits.softmax(dim=-1)
        return self.phi(weights @ v), weights, v


class SelfAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        n, t, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).view(n, t, 3, h, d // h).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1) / math.sqrt(d // h)).softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(n, t, d)
        return self.proj(out)


class EncoderBlock(nn.Module):
    """Pre-norm transformer block: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim, heads, mlp_dim):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_dim), nn.GELU(), nn.Linear(mlp_dim, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TemporalTransformer(nn.Module):
    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.content_tokens, cfg.content_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.content_dim, cfg.tte_heads, cfg.tte_mlp_dim) for _ in range(cfg.tte_depth)
        )
        self.norm = nn.LayerNorm(cfg.content_dim)

    def forward(self, x):
        x = x + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class FusionHead(nn.Module):
    """sigmoid(f_cls(pool(TTE(C + SAM(E, C))))) with C as (N, content_dim, T) tokens."""

    def __init__(self, cfg: FusionConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or FusionConfig()
        self.sam = StyleAttention(cfg)
        self.tte = TemporalTransformer(cfg)
        self.f_cls = nn.Linear(cfg.content_dim, 1)

    def _check(self, embedding, content):
        c = self.cfg
        if content.shape[-2:] != (c.content_dim, c.content_tokens):
            raise ShapeError(f"content feature must be ({c.content_dim}, {c.content_tokens}), got {tuple(content.shape)}")
        if embedding.shape[1] != c.style_dim or embedding.shape[2] * embedding.shape[3] != c.style_tokens:
            raise ShapeError(f"style embedding must be ({c.style_dim}, B, L) with B*L={c.style_tokens}, "
                             f"got {tuple(embedding.shape)}")

    def forward(self, embedding, content, return_features=False):
        """embedding (N, C, B, L), content (N, content_dim, T). Returns logits (N,) and an info dict."""
        self._check(embedding, content)
        tokens = content.transpose(1, 2)
        info = {}
        if self.cfg.use_sam:
            sam_out, weights, values = self.sam(embedding_tokens(embedding), tokens)
            tokens = tokens + sam_out
            info.update(weights=weights, values=values)
        feats = self.tte(tokens)
        pooled = feats.mean(dim=1) if self.cfg.pool == "mean" else feats[:, 0]
        info["features"] = pooled
        return self.f_cls(pooled).squeeze(-1), info


def style_attention(embedding, content, head: FusionHead):
    """Attention weights (N, 16, 4) and SAM output in content layout (N, 1024, 16)."""
    out, weights, _ = head.sam(embedding_tokens(embedding), content.transpose(1, 2))
    return weights, out.transpose(1, 2)


def predict(embedding, content, head: FusionHead) -> torch.Tensor:
    logits, _ = head(embedding, content)
    return torch.sigmoid(logits)


def sam_response(weights, values) -> torch.Tensor:
    """Per-clip mean over query tokens of the attention-weighted value norm: mean_q sum_k w_qk |v_k|."""
    norms = values.norm(dim=-1)  # (N, S)
    return (weights * norms[:, None, :]).sum(-1).mean(-1)


def export_sam_response(rows, path):
    """rows: iterable of (clip_id, score, response). Writes clip_id,score,response CSV."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "score", "response"])
        for clip_id, score, response in rows:
            w.writerow([clip_id, repr(float(score)), repr(float(response))])
    return path


def rank_by_response(responses) -> list[int]:
    """Clip indices ordered by descending SAM response (stable)."""
    return np.argsort(-np.asarray(responses, dtype=np.float64), kind="stable").tolist()
