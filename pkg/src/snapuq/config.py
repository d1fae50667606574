"""Declarative ``key = value`` config files.

One setting per line, ``#`` starts a comment. Values are coerced to the type
of the matching dataclass default: bool (true/false/1/0), int, float, str,
or a comma-separated tuple of ints/floats. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses

from .errors import ConfigError


def read_kv(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (t.strip() for t in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            out[key] = value
    return out


def _coerce(key, value, default):
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = [v.strip() for v in value.split(",") if v.strip()]
            if not default or isinstance(default[0], float):
                return tuple(float(v) for v in items)
            if isinstance(default[0], str):
                return tuple(items)
            return tuple(int(v) for v in items)
        if default is None:
            if value.lower() in ("none", ""):
                return None
            try:
                return float(value)
            except ValueError:
                return value
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    return value


def build(cls, values: dict):
    """Instantiate dataclass ``cls`` from string values, type-coerced."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    defaults = cls()
    kwargs = {k: _coerce(k, v, getattr(defaults, k)) for k, v in values.items()}
    obj = dataclasses.replace(defaults, **kwargs)
    validate = getattr(obj, "validate", None)
    if validate is not None:
        validate()
    return obj


def dump(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
