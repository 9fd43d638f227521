"""Flat ``key = value`` config files mapped onto dataclasses.

Value types come from each field's default: bools accept true/false/yes/no/1/0,
tuples are comma separated, and ``none`` clears an optional field.
"""
from __future__ import annotations

import dataclasses
import hashlib

from .errors import ParseError, ValidationError
from .scene_io import read_kv


def _convert(text, default, key):
    low = text.strip().lower()
    if default is None:
        if low in ("none", "auto", ""):
            return None
        try:
            return int(text)
        except ValueError:
            return float(text)
    if isinstance(default, bool):
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(float(t) for t in text.split(","))
    return text.strip()


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def from_mapping(cls, mapping, path=None):
    """Build ``cls`` from ``{key: (text, lineno)}``; unknown keys are errors."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, (text, lineno) in mapping.items():
        if key not in fields:
            raise ParseError(f"unknown key {key!r}", path, lineno)
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        try:
            kwargs[key] = _convert(text, default, key)
        except ValueError as exc:
            raise ParseError(f"bad value for {key!r}: {exc}", path, lineno) from None
    try:
        return cls(**kwargs)
    except ValidationError as exc:
        raise ParseError(str(exc), path) from None


def load_config(cls, path):
    return from_mapping(cls, read_kv(path), path)


def to_lines(cfg):
    return [f"{f.name} = {_format(getattr(cfg, f.name))}" for f in dataclasses.fields(cfg)]


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(to_lines(cfg)) + "\n")


def config_hash(cfg):
    text = "\n".join(to_lines(cfg)).encode("utf-8")
    return hashlib.sha256(text).hexdigest()[:16]
