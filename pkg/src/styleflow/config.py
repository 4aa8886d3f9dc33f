"""Stage config files: TOML, keys named exactly like the config dataclass fields."""
from __future__ import annotations

import dataclasses
import sys
import typing
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .contrastive import Stage1Config
from .errors import ConfigError, RangeError, TypeMismatchError, UnknownKeyError
from .stage2 import Stage2Config
from .synthetic import SyntheticSpec

CONFIG_KINDS = {
    "stage1": Stage1Config,
    "stage2": Stage2Config,
    "synth": SyntheticSpec,
}


def _coerce(key, value, tp):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise TypeMismatchError(key, f"expected a table, got {type(value).__name__}")
        return build_dataclass(tp, value, prefix=f"{key}.")
    if tp is bool:
        if not isinstance(value, bool):
            raise TypeMismatchError(key, f"expected bool, got {type(value).__name__}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeMismatchError(key, f"expected int, got {type(value).__name__}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeMismatchError(key, f"expected number, got {type(value).__name__}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise TypeMismatchError(key, f"expected string, got {type(value).__name__}")
        return value
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise TypeMismatchError(key, f"expected array, got {type(value).__name__}")
        return tuple(value)
    return value


def build_dataclass(cls, data: dict, prefix: str = ""):
    """Instantiate ``cls`` from a nested dict, rejecting unknown keys and wrong types."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise UnknownKeyError(prefix + key, f"unknown key (expected one of: {', '.join(sorted(names))})")
        kwargs[key] = _coerce(prefix + key, value, hints[key])
    try:
        return cls(**kwargs)
    except RangeError as exc:
        if not prefix or exc.key.startswith(prefix):
            raise
        raise RangeError(prefix + exc.key, exc.message) from exc
    except ConfigError:
        raise
    except ValueError as exc:
        raise RangeError(prefix.rstrip(".") or cls.__name__, str(exc)) from exc


def parse_config_text(text: str, kind: str):
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"not valid TOML: {exc}") from exc
    return build_dataclass(CONFIG_KINDS[kind], data)


def parse_config(path, kind: str):
    """Read and validate a stage config. A missing path yields the defaults."""
    if path is None:
        return CONFIG_KINDS[kind]()
    return parse_config_text(Path(path).read_text(), kind)


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
