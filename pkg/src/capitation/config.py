"""Flat ``key = value`` configuration files.

Blank lines and lines starting with ``#`` are ignored. Keys use
underscores; values are parsed to the type of the field default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

from .domain import CapitationError

ENV_VAR = "CAPITA_CONFIG"


class ConfigError(CapitationError):
    pass


@dataclass(frozen=True)
class Config:
    fiscal_year_anchor_month: int = 7
    calibration_anchor_month: int = 1
    adjustment_threshold: float = 0.30
    carry_forward_split: int = 1
    ambulance_copay_rate: float = 0.10
    quarantine_fraction: float = 0.01
    n_tiers: int = 3
    n_capture_groups: int = 5
    seed: int = 42
    n_splits: int = 500
    train_fraction: float = 0.8
    iqr_multiplier: float = 1.5
    bhattacharyya_bins: int = 20
    bhattacharyya_threshold: float = 0.223
    age_cutoff: int = 15
    min_category_visits: int = 10
    n_cost_groups: int = 4

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def parse_pairs(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        pairs[key] = value
    return pairs


def coerce(cls, pairs: dict[str, str]) -> dict:
    """Convert string values to the types of ``cls`` dataclass defaults."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, value in pairs.items():
        if key not in fields:
            raise ConfigError(f"unknown configuration key {key!r}")
        default = fields[key].default
        if default is dataclasses.MISSING and fields[key].default_factory is not dataclasses.MISSING:
            default = fields[key].default_factory()
        try:
            if isinstance(default, bool):
                if value.lower() not in ("true", "false"):
                    raise ValueError(value)
                out[key] = value.lower() == "true"
            elif isinstance(default, int):
                out[key] = int(value)
            elif isinstance(default, float):
                out[key] = float(value)
            elif isinstance(default, tuple):
                out[key] = tuple(float(v) for v in value.split(","))
            elif isinstance(default, dict):
                items = (kv.split(":") for kv in value.split(","))
                out[key] = {k.strip(): float(v) for k, v in items}
            else:
                out[key] = value
        except ValueError:
            raise ConfigError(f"invalid value for {key}: {value!r}") from None
    return out


def load_config(path=None) -> Config:
    """Read a config file; falls back to ``$CAPITA_CONFIG`` then defaults."""
    if path is None:
        path = os.environ.get(ENV_VAR) or None
    if path is None:
        return Config()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return Config(**coerce(Config, parse_pairs(text)))
