"""Versioned ``key = value`` text configs mapped onto dataclasses."""

from __future__ import annotations

from dataclasses import fields


class ConfigError(ValueError):
    pass


def parse_text(text):
    """Return a dict of raw string values; ``#`` starts a comment."""
    kv = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        kv[key.strip()] = value.strip()
    return kv


def _convert(value, kind):
    if kind in (bool, "bool"):
        if value not in ("true", "false", "True", "False", "1", "0"):
            raise ConfigError(f"not a boolean: {value!r}")
        return value in ("true", "True", "1")
    if kind in (int, "int"):
        return int(float(value)) if "e" in value.lower() else int(value)
    if kind in (float, "float"):
        return float(value)
    if kind in (str, "str"):
        return value
    raise ConfigError(f"unsupported field type {kind!r}")


def dataclass_to_text(obj, fmt, version):
    lines = [f"format = {fmt}", f"version = {version}"]
    lines += [f"{f.name} = {getattr(obj, f.name)}" for f in fields(obj)]
    return "\n".join(lines) + "\n"


def dataclass_from_text(cls, text, fmt, version, base=None):
    """Build ``cls`` from config text; keys missing from the text keep the
    values of ``base`` (or the dataclass defaults).  Unknown keys raise."""
    kv = parse_text(text)
    if kv.pop("format", fmt) != fmt:
        raise ConfigError(f"expected a {fmt!r} config")
    if int(kv.pop("version", version)) != version:
        raise ConfigError(f"unsupported {fmt} config version")
    types = {f.name: f.type for f in fields(cls)}
    args = {f.name: getattr(base, f.name) for f in fields(cls)} if base is not None else {}
    for key, value in kv.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            args[key] = _convert(value, types[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return cls(**args)
