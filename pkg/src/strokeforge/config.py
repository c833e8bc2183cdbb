"""Plain-text key-value configuration documents.

One ``key = value`` pair per line, ``#`` comments. Keys mirror the dataclass
field names exactly (loss weights appear flat as alpha/beta/gamma/delta), so
CLI flags and config files never diverge in naming.
"""
from __future__ import annotations

import dataclasses

from .losses import LossWeights
from .phantom import PhantomSpec
from .pipeline import TrainConfig, config_from_dict, config_to_dict


class ConfigError(ValueError):
    pass


def _parse_scalar(token: str):
    token = token.strip()
    low = token.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        pass
    return token


def parse_kv_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if "," in value:
            out[key] = tuple(_parse_scalar(tok) for tok in value.split(","))
        else:
            out[key] = _parse_scalar(value)
    return out


def read_kv(path) -> dict:
    with open(path) as fh:
        return parse_kv_text(fh.read())


def format_kv(d: dict) -> str:
    lines = []
    for key, value in d.items():
        if isinstance(value, (tuple, list)):
            lines.append(f"{key} = {', '.join(str(v) for v in value)}")
        else:
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


_TRAIN_KEYS = set(config_to_dict(TrainConfig()))
_PHANTOM_KEYS = {f.name for f in dataclasses.fields(PhantomSpec)}


def train_config_from_mapping(mapping: dict) -> TrainConfig:
    unknown = set(mapping) - _TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    try:
        return config_from_dict(mapping)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def train_config_from_file(path, overrides: dict | None = None) -> TrainConfig:
    mapping = read_kv(path)
    if overrides:
        mapping.update(overrides)
    return train_config_from_mapping(mapping)


def train_config_to_text(cfg: TrainConfig) -> str:
    return format_kv(config_to_dict(cfg))


def phantom_spec_from_file(path) -> PhantomSpec:
    mapping = read_kv(path)
    unknown = set(mapping) - _PHANTOM_KEYS
    if unknown:
        raise ConfigError(f"unknown phantom key(s): {', '.join(sorted(unknown))}")
    try:
        spec = PhantomSpec(**mapping)
        spec.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return spec


def phantom_spec_to_text(spec: PhantomSpec) -> str:
    return format_kv(dataclasses.asdict(spec))


def default_weights() -> LossWeights:
    return LossWeights()
