"""Checkpoint directories: one ``manifest.toml`` plus one weight blob per module."""
from __future__ import annotations

import dataclasses
import hashlib
import sys
import time
from pathlib import Path

import tomli_w
import torch
import torch.nn as nn

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .config import build_dataclass
from .contrastive import Stage1Config, build_stylegru
from .errors import MissingCheckpointError
from .stage2 import Stage2Config, StyleFlowDetector, build_detector

MANIFEST = "manifest.toml"


def content_hash(module: nn.Module) -> str:
    """sha256 over (name, raw bytes) of every state-dict tensor, in sorted order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def write_manifest(path, kind: str, *, seed: int, configs: dict, hashes: dict | None = None,
                   fingerprints: dict | None = None, extra: dict | None = None, timestamp: bool = True) -> Path:
    doc = {
        "kind": kind,
        "seed": seed,
        "versions": {"styleflow": __version__, "torch": torch.__version__, "python": sys.version.split()[0]},
        "configs": _plain(configs),
        "hashes": hashes or {},
        "fingerprints": fingerprints or {},
    }
    if timestamp:
        doc["created"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    if extra:
        doc["extra"] = _plain(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(tomli_w.dumps(doc).encode())
    return path


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise MissingCheckpointError(f"no {MANIFEST} in {directory}")
    return tomllib.loads(path.read_text())


def save_modules(directory, modules: dict[str, nn.Module]) -> dict[str, str]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for name, module in modules.items():
        torch.save(module.state_dict(), directory / f"{name}.pt")
        hashes[name] = content_hash(module)
    return hashes


def _load_into(directory, name, module):
    path = Path(directory) / f"{name}.pt"
    if not path.is_file():
        raise MissingCheckpointError(f"missing weight blob {path}")
    module.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    return module


def save_stage1(directory, model, config: Stage1Config, history, fingerprints=None, config_text=None) -> Path:
    hashes = save_modules(directory, {"stylegru": model})
    extra = {"history": history, "config_text": {"stage1": config_text or ""}}
    return write_manifest(Path(directory) / MANIFEST, "stage1", seed=config.seed,
                          configs={"stage1": config}, hashes=hashes, fingerprints=fingerprints, extra=extra)


def load_stage1(directory):
    manifest = read_manifest(directory)
    if manifest.get("kind") != "stage1":
        raise MissingCheckpointError(f"{directory} is not a stage-1 checkpoint")
    config = build_dataclass(Stage1Config, manifest["configs"]["stage1"])
    model = _load_into(directory, "stylegru", build_stylegru(config))
    model.eval()
    return model, config, manifest


def save_stage2(directory, model: StyleFlowDetector, stage1_config: Stage1Config, config: Stage2Config,
                history, fingerprints=None, frozen_hash=None, config_text=None) -> Path:
    """``config_text`` maps stage name to the verbatim config file text, echoed into the manifest."""
    hashes = save_modules(directory, {"stylegru": model.stylegru, "backbone": model.backbone, "head": model.head})
    extra = {"history": history, "frozen_stylegru_hash": frozen_hash or hashes["stylegru"],
             "config_text": config_text or {}}
    return write_manifest(Path(directory) / MANIFEST, "stage2", seed=config.seed,
                          configs={"stage1": stage1_config, "stage2": config}, hashes=hashes,
                          fingerprints=fingerprints, extra=extra)


def load_detector(directory) -> tuple[StyleFlowDetector, dict]:
    manifest = read_manifest(directory)
    if manifest.get("kind") != "stage2":
        raise MissingCheckpointError(f"{directory} is not a stage-2 model checkpoint")
    s1 = build_dataclass(Stage1Config, manifest["configs"]["stage1"])
    s2 = build_dataclass(Stage2Config, manifest["configs"]["stage2"])
    model = build_detector(build_stylegru(s1), s2, s1.band, s1.difference)
    for name in ("stylegru", "backbone", "head"):
        _load_into(directory, name, getattr(model, name))
    model.freeze_stylegru()
    model.eval()
    return model, manifest
