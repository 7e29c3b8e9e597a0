"""Flat ``key = value`` config files.

Blank lines and ``#`` comments are ignored. Values are parsed as int, float,
bool or comma-separated lists where they look like one, else kept as strings.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    pass


def parse_value(text: str) -> Any:
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if "," in text:
        return [parse_value(t) for t in text.split(",") if t.strip()]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_kv_file(path) -> dict[str, Any]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def write_kv_file(path, values: Mapping[str, Any]):
    lines = []
    for k in sorted(values):
        v = values[k]
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v) + ("," if len(v) == 1 else "")
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def apply_overrides(obj, values: Mapping[str, Any], strict: bool = False):
    """Return a copy of dataclass ``obj`` with matching keys replaced."""
    names = {f.name: f for f in dataclasses.fields(obj)}
    kwargs = {}
    for key, value in values.items():
        if key not in names:
            if strict:
                raise ConfigError(f"unknown key {key!r} for {type(obj).__name__}")
            continue
        current = getattr(obj, key)
        if isinstance(current, tuple) and not isinstance(value, (list, tuple)):
            value = (value,)
        if isinstance(current, tuple):
            value = tuple(value)
        elif isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        kwargs[key] = value
    return dataclasses.replace(obj, **kwargs)
