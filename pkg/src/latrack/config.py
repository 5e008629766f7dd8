"""Flat key=value configuration shared by every command.

One namespace covers the synthetic-data, training, and post-processing
dataclasses; keys appearing in more than one section (crop sizes, seed) feed
all of them.  Unknown keys are errors, and command-line overrides win over
the file.
"""

from __future__ import annotations

from dataclasses import fields

from .tracker import PostProcessConfig
from .training import SyntheticConfig, TrainConfig


class ConfigError(ValueError):
    """Unknown key, unparsable value, or invalid configuration."""


_SECTIONS = (SyntheticConfig, TrainConfig, PostProcessConfig)


def _build_key_table() -> dict[str, type]:
    table: dict[str, type] = {}
    for section in _SECTIONS:
        for f in fields(section):
            kind = type(f.default)
            if f.name in table and table[f.name] is not kind:
                raise RuntimeError(f"conflicting config key {f.name}")
            table[f.name] = kind
    return table


KEY_TYPES = _build_key_table()

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_value(key: str, text: str):
    if key not in KEY_TYPES:
        raise ConfigError(f"unknown config key: {key!r}")
    kind = KEY_TYPES[key]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {text!r} (expected {kind.__name__})") from e


def load_config(path: str) -> dict:
    """Parse a `key = value` file; '#' starts a comment."""
    flat: dict = {}
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, text = (part.strip() for part in line.split("=", 1))
        flat[key] = parse_value(key, text)
    return flat


def apply_overrides(flat: dict, overrides) -> dict:
    out = dict(flat)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, text = (part.strip() for part in item.split("=", 1))
        out[key] = parse_value(key, text)
    return out


def load_flat(path: str | None, overrides=None) -> dict:
    flat = load_config(path) if path else {}
    return apply_overrides(flat, overrides)


def _build(section, flat: dict):
    names = {f.name for f in fields(section)}
    kwargs = {k: v for k, v in flat.items() if k in names}
    try:
        return section(**kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def synthetic_config(flat: dict) -> SyntheticConfig:
    return _build(SyntheticConfig, flat)


def train_config(flat: dict) -> TrainConfig:
    return _build(TrainConfig, flat)


def postprocess_config(flat: dict) -> PostProcessConfig:
    return _build(PostProcessConfig, flat)
