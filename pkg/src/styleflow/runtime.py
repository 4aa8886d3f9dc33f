"""Determinism switches and the ``level ts msg key=val`` log format."""
from __future__ import annotations

import logging
import random
import time

import numpy as np
import torch


def set_determinism(seed: int, deterministic: bool = True) -> None:
    """Seed every RNG we use; in deterministic mode also force single-threaded, deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _fmt_value(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    s = str(v)
    return f'"{s}"' if (" " in s or not s) else s


class KeyValueFormatter(logging.Formatter):
    """One line per record: ``LEVEL 2024-01-01T00:00:00Z message key=val ...``.

    Structured fields come from ``extra={"kv": {...}}``.
    """

    converter = time.gmtime

    def format(self, record):
        ts = self.formatTime(record, "%Y-%m-%dT%H:%M:%SZ")
        parts = [record.levelname.lower(), ts, record.getMessage().replace(" ", "_")]
        kv = getattr(record, "kv", None) or {}
        parts += [f"{k}={_fmt_value(v)}" for k, v in kv.items()]
        line = " ".join(parts)
        if record.exc_info:
            line += " error=" + _fmt_value(repr(record.exc_info[1]))
        return line


def configure_logging(level: int = logging.INFO, stream=None) -> logging.Handler:
    handler = logging.StreamHandler(stream)
    handler.setFormatter(KeyValueFormatter())
    root = logging.getLogger("styleflow")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False
    return handler
