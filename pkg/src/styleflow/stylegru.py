"""StyleGRU: bidirectional GRU over style flow, plus the auxiliary residual MLP classifier."""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .errors import ShapeError
from .latents import LATENT_DIM


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass
class StyleGRUConfig:
    input_dim: int = LATENT_DIM
    hidden_size: int = 4096
    num_layers: int = 2
    bidirectional: bool = True
    input_dropout: float = 0.2
    rnn_dropout: float = 0.1
    aux_hidden: int = 4096

    @property
    def num_directions(self) -> int:
        return 2 if self.bidirectional else 1

    @property
    def embedding_dim(self) -> int:
        return self.hidden_size * self.num_directions * self.num_layers

    def to_dict(self):
        return asdict(self)


class AuxClassifier(nn.Module):
    """Three hidden FC layers; a residual connection wraps layers 2 and 3.

    fc1: embedding -> hidden, then h + fc3(relu(fc2(h))), then a scalar head.
    """

    def __init__(self, in_dim, hidden=4096):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, hidden)
        self.head = nn.Linear(hidden, 1)
        self.act = nn.ReLU()

    def features(self, x):
        h = self.act(self.fc1(x))
        h = self.act(h + self.fc3(self.act(self.fc2(h))))
        return h

    def forward(self, x):
        return self.head(self.features(x)).squeeze(-1)


class StyleGRU(nn.Module):
    def __init__(self, config: StyleGRUConfig | None = None):
        super().__init__()
        self.config = cfg = config or StyleGRUConfig()
        self.input_dropout = nn.Dropout(cfg.input_dropout)
        self.gru = nn.GRU(
            cfg.input_dim,
            cfg.hidden_size,
            num_layers=cfg.num_layers,
            batch_first=True,
            bidirectional=cfg.bidirectional,
            # inter-layer dropout; a single-layer GRU has nowhere to apply it
            dropout=cfg.rnn_dropout if cfg.num_layers > 1 else 0.0,
        )
        self.aux = AuxClassifier(cfg.embedding_dim, cfg.aux_hidden)
        self.reset_input_weights()

    def reset_input_weights(self):
        # torch scales every GRU weight by 1/sqrt(hidden); with 9216-wide inputs that saturates
        # the gates, so input-to-hidden weights get a fan-in scale instead
        for name, w in self.gru.named_parameters():
            if name.startswith("weight_ih"):
                bound = 1.0 / w.shape[1] ** 0.5
                nn.init.uniform_(w, -bound, bound)

    def forward(self, flow):
        """flow: (N, T, levels, channels) or (N, T, D). Returns (N, C, B, L) final hidden states."""
        if flow.dim() == 4:
            flow = flow.flatten(2)
        if flow.dim() != 3 or flow.shape[-1] != self.config.input_dim:
            raise ShapeError(
                f"style flow must flatten to {self.config.input_dim} features per step, got {tuple(flow.shape)}"
            )
        if flow.shape[1] < 1:
            raise ShapeError("style flow needs at least one timestep")
        _, h_n = self.gru(self.input_dropout(flow))
        # h_n is (L * B, N, C), ordered layer-major then direction
        cfg = self.config
        n = flow.shape[0]
        h = h_n.view(cfg.num_layers, cfg.num_directions, n, cfg.hidden_size)
        return h.permute(2, 3, 1, 0)

    def embed(self, flow):
        """Flattened embedding (N, C*B*L) used by the triplet loss and the aux classifier."""
        return self(flow).flatten(1)

    def classify_logits(self, flow):
        return self.aux(self.embed(flow))


def encode(flow, model: StyleGRU, mode: Mode = Mode.EVAL) -> torch.Tensor:
    """Encode a single StyleFlow (or a (T, levels, channels) array) to a (C, B, L) embedding."""
    x = getattr(flow, "flow", flow)
    x = torch.as_tensor(x, dtype=next(model.parameters()).dtype).unsqueeze(0)
    was_training = model.training
    model.train(Mode(mode) is Mode.TRAIN)
    try:
        with torch.set_grad_enabled(Mode(mode) is Mode.TRAIN):
            out = model(x)[0]
    finally:
        model.train(was_training)
    return out


def embedding_tokens(embedding):
    """(N, C, B, L) -> (N, B*L, C): one attendable token per (direction, layer) slot."""
    n, c, b, l = embedding.shape
    return embedding.permute(0, 2, 3, 1).reshape(n, b * l, c)


def aux_classify(embedding, model: StyleGRU) -> torch.Tensor:
    """Sigmoid probability from a (C, B, L) or batched (N, C, B, L) embedding."""
    flat = embedding.flatten(-3)
    return torch.sigmoid(model.aux(flat))
