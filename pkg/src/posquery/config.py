"""Flat ``key = value`` configuration text with a typed dataclass schema.

Unknown keys and unparsable values are hard errors. ``dump`` produces the
canonical form (sorted keys, repr-exact floats) that checkpoints embed.
"""

import dataclasses
import typing

from .errors import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name, typ, raw):
    raw = raw.strip()
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if origin is tuple:
            (item,) = set(typing.get_args(typ)) - {Ellipsis}
            parts = [p for p in raw.replace(" ", "").split(",") if p]
            return tuple(item(p) for p in parts)
        if origin is typing.Union:
            args = [a for a in typing.get_args(typ) if a is not type(None)]
            if raw.lower() in ("", "none"):
                return None
            return _coerce(name, args[0], raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {raw!r} ({exc})") from None
    raise ConfigError(f"unsupported field type for {name}: {typ}")


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def parse_text(text):
    """``key = value`` lines into a dict of raw strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def build(cls, raw, base=None):
    """Instantiate dataclass ``cls`` from raw strings layered over ``base``."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = dataclasses.asdict(base) if base is not None else {}
    for key, value in raw.items():
        values[key] = value if not isinstance(value, str) else _coerce(key, hints[key], value)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def dump(obj):
    return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(dataclasses.asdict(obj).items()))


def load(cls, text, base=None):
    return build(cls, parse_text(text), base)
