"""Flat ``key = value`` config files mapped onto dataclasses."""

from __future__ import annotations

import configparser
import dataclasses
import typing
from pathlib import Path
from typing import Any, TypeVar

from .errors import ConfigurationError

T = TypeVar("T")
_SECTION = "config"


def read_kv(path: str | Path) -> dict[str, str]:
    """Parse a flat config file; ``#`` and ``;`` start comments."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case
    text = Path(path).read_text()
    try:
        parser.read_string(f"[{_SECTION}]\n{text}")
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return dict(parser[_SECTION])


def write_kv(values: dict[str, Any], path: str | Path) -> Path:
    path = Path(path)
    lines = [f"{k} = {format_value(v)}" for k, v in values.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


def format_value(v: Any) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v)
    if v is None:
        return "none"
    return str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(raw: str, hint: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if raw.strip().lower() in ("none", ""):
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin in (tuple, list):
        inner = args[0] if args else str
        items = [s for s in raw.replace(" ", "").split(",") if s]
        seq = [_coerce(s, inner, key) for s in items]
        return tuple(seq) if origin is tuple else seq
    try:
        if hint is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint in (int, float, str):
            return hint(raw.strip())
    except ValueError as exc:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {hint.__name__}") from exc
    return raw.strip()


def coerce_kv(cls: type, values: dict[str, Any]) -> dict[str, Any]:
    """Parse the string entries of ``values`` whose keys are fields of ``cls``; others pass through."""
    hints = typing.get_type_hints(cls)
    return {k: _coerce(v, hints[k], k) if isinstance(v, str) and k in hints else v for k, v in values.items()}


def from_kv(cls: type[T], values: dict[str, str], **overrides) -> T:
    """Build dataclass ``cls`` from string values; unknown keys are an error."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = coerce_kv(cls, values)
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**kwargs)


def to_kv(obj) -> dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
