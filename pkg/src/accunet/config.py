"""Flat ``key = value`` text configs for the dataclass configs.

Keys are dotted with a section prefix (``model.se_ratio``, ``train.patience``,
``data.hw``). Tuples are comma-separated, mappings are ``key:value`` pairs
separated by commas, booleans are ``true``/``false``. ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
from typing import Mapping


class ConfigError(ValueError):
    pass


def _encode(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_encode(v) for v in value)
    if isinstance(value, dict):
        return ",".join(f"{k}:{_encode(v)}" for k, v in value.items())
    return str(value)


def _decode(text: str, like, key: str):
    text = text.strip()
    try:
        if isinstance(like, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            elem = like[0] if like else 0
            return tuple(_decode(t, elem, key) for t in text.split(",") if t.strip())
        if isinstance(like, dict):
            out = {}
            for item in filter(None, (t.strip() for t in text.split(","))):
                k, _, v = item.rpartition(":")
                if not k:
                    raise ValueError(item)
                out[k.strip()] = int(v)
            return out
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from None
    return text


def to_kv(cfg, prefix: str) -> dict:
    return {f"{prefix}.{f.name}": _encode(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}


def from_kv(cls, values: Mapping[str, str], prefix: str, base=None):
    """Build ``cls`` from the keys under ``prefix``; other prefixes are ignored."""
    base = base if base is not None else cls()
    known = {f.name for f in dataclasses.fields(cls)}
    changes = {}
    for key, text in values.items():
        section, _, name = key.partition(".")
        if section != prefix:
            continue
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        changes[name] = _decode(text, getattr(base, name), key)
    return dataclasses.replace(base, **changes)


def parse_kv(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def format_kv(values: Mapping[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())
