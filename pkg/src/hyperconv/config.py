"""Flat ``key = value`` configuration files.

One assignment per line, ``#`` starts a comment, lists are comma separated.
A single file may hold network and training keys together; values are
coerced to the type of the matching dataclass field.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path
from typing import Any, Union

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


class ConfigError(ValueError):
    pass


def parse_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_text(values: dict[str, Any]) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        elif value is None:
            value = "none"
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _coerce(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if raw.lower() in ("none", ""):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(raw, inner, key)
    try:
        if origin is tuple:
            elem = args[0] if args else str
            return tuple(_coerce(p.strip(), elem, key) for p in raw.split(",") if p.strip())
        if hint is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {getattr(hint, '__name__', hint)}") from None
    return raw


def coerce_fields(cls, raw: dict[str, str]) -> dict[str, Any]:
    """Typed values for the keys of ``raw`` that are fields of dataclass ``cls``."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    return {k: _coerce(v, hints[k], k) for k, v in raw.items() if k in names}


def split_config(raw: dict[str, str], *classes) -> list[dict[str, Any]]:
    """Distribute keys over dataclasses; unknown keys are an error."""
    known = set()
    out = []
    for cls in classes:
        out.append(coerce_fields(cls, raw))
        known.update(f.name for f in dataclasses.fields(cls))
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return out


def load_file(path: Union[str, Path]) -> dict[str, str]:
    try:
        return parse_text(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


def load_configs(path: Union[str, Path]):
    """``(NetworkConfig, TrainConfig)`` from one file."""
    from .network import NetworkConfig
    from .training import TrainConfig

    net_kw, train_kw = split_config(load_file(path), NetworkConfig, TrainConfig)
    try:
        return NetworkConfig(**net_kw), TrainConfig(**train_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
