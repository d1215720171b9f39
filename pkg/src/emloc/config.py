"""Config files (YAML or JSON), dotted ``key=value`` overrides and typed
dataclass construction with unknown-key rejection."""

from __future__ import annotations

import copy
import dataclasses
import json
import typing
from pathlib import Path
from typing import Any, Optional, Sequence

import yaml

from .errors import ConfigError
from .geometry import Pose6D


def load_config(path) -> dict:
    """Parse a YAML or JSON file into a dict (an empty file gives {})."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        d = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{p}: not valid {'JSON' if p.suffix == '.json' else 'YAML'}: {exc}") from exc
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return d


def apply_overrides(d: dict, overrides: Sequence[str]) -> dict:
    """Return a copy of ``d`` with each ``a.b.c=value`` applied; values are
    parsed as YAML scalars / flow collections."""
    out = copy.deepcopy(d)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: {exc}") from exc
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {item!r}: {part} is not a mapping")
            node = nxt
        node[parts[-1]] = value
    return out


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        if len(inner) == 1:
            return _coerce(inner[0], value, where)
        return value
    if tp is Pose6D and isinstance(value, dict):
        try:
            return Pose6D.from_dict(value) if "q" in value else Pose6D.from_euler(
                value.get("t", (0.0, 0.0, 0.0)), value.get("yaw", 0.0), value.get("pitch", 0.0),
                value.get("roll", 0.0))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: bad pose {value!r}") from exc
    if dataclasses.is_dataclass(tp) and isinstance(value, dict):
        return build_dataclass(tp, value, where)
    if tp is tuple and isinstance(value, list):
        return tuple(value)
    return value


def build_dataclass(cls, d: Optional[dict], where: str = ""):
    """``cls(**d)`` with nested dataclasses built from sub-dicts; unknown
    keys and constructor errors become ConfigError."""
    d = {} if d is None else d
    if not isinstance(d, dict):
        raise ConfigError(f"{where or cls.__name__}: expected a mapping, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where or cls.__name__}: unknown keys {unknown}")
    kw = {k: _coerce(hints.get(k, Any), v, f"{where}.{k}" if where else k) for k, v in d.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or cls.__name__}: {exc}") from exc


def to_plain(obj) -> Any:
    """JSON-ready view of configs: dataclasses, poses, tuples, numpy scalars."""
    if isinstance(obj, Pose6D):
        return obj.to_dict()
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if hasattr(obj, "tolist"):
        return obj.tolist()
    return obj


def write_resolved(cfg: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(to_plain(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
