"""Flat run configuration: JSON file values, overridden by command-line flags."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .unet import UNetSpec


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class RunConfig:
    # network
    depth: int = 3
    base_channels: int = 16
    channel_mult: tuple[int, ...] = (1, 2, 2)
    image_size: int = 16
    time_embed_dim: int = 32
    in_channels: int = 1
    # noise schedule
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # data and training
    data_seed: int = 0
    data_count: int = 4096
    seed: int = 0
    epochs: int = 30
    optimizer: str = "adam"
    lr: float = 2e-3
    momentum: float = 0.9
    batch_size: int = 64
    # sampling
    sampler: str = "ddim"
    steps: int = 100
    eta: float = 0.0
    batch: int = 16
    # caching; cache_N None means the plain sampler
    cache_N: int | None = None
    cache_mode: str = "uniform"
    center: float | None = None
    power: float | None = None
    branch: int = 1
    zero_cache: bool = False
    # analysis / bench
    tau: float = 0.95
    samples: int = 256
    timing_batch: int = 16
    trials: int = 3
    warmup: int = 1
    reference_count: int = 1024
    reference_seed: int = 10_000

    def unet_spec(self) -> UNetSpec:
        return UNetSpec(self.depth, self.base_channels, tuple(self.channel_mult), self.image_size,
                        self.time_embed_dim, self.in_channels, self.T)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        return d

    def validate(self) -> "RunConfig":
        def need(ok: bool, name: str, msg: str):
            if not ok:
                raise ConfigError(name, msg)

        for name in ("depth", "base_channels", "image_size", "time_embed_dim", "in_channels", "T",
                     "data_count", "batch_size", "steps", "batch", "samples", "timing_batch", "reference_count"):
            need(getattr(self, name) >= 1, name, "must be >= 1")
        need(len(self.channel_mult) == self.depth, "channel_mult", f"needs {self.depth} entries")
        need(all(m >= 1 for m in self.channel_mult), "channel_mult", "entries must be >= 1")
        need(self.image_size % 2 ** self.depth == 0, "image_size", f"must be divisible by 2**depth = {2 ** self.depth}")
        need(self.time_embed_dim % 2 == 0, "time_embed_dim", "must be even")
        need(0 < self.beta_start < 1, "beta_start", "must lie in (0, 1)")
        need(self.beta_start <= self.beta_end < 1, "beta_end", "must lie in [beta_start, 1)")
        need(self.epochs >= 0, "epochs", "must be >= 0")
        need(self.lr >= 0 and math.isfinite(self.lr), "lr", "must be a finite number >= 0")
        need(0 <= self.momentum < 1, "momentum", "must lie in [0, 1)")
        need(self.optimizer in ("adam", "sgd"), "optimizer", "must be 'adam' or 'sgd'")
        need(self.sampler in ("ddpm", "ddim"), "sampler", "must be 'ddpm' or 'ddim'")
        need(self.steps <= self.T, "steps", f"must be <= T = {self.T}")
        need(self.eta >= 0, "eta", "must be >= 0")
        need(self.cache_N is None or self.cache_N >= 1, "cache_N", "must be >= 1")
        need(self.cache_mode in ("uniform", "nonuniform"), "cache_mode", "must be 'uniform' or 'nonuniform'")
        need(self.center is None or 0 <= self.center < self.steps, "center", f"must lie in [0, steps = {self.steps})")
        need(self.power is None or self.power > 0, "power", "must be > 0")
        need(1 <= self.branch <= self.depth, "branch", f"must lie in [1, depth = {self.depth}]")
        need(-1 <= self.tau <= 1, "tau", "must lie in [-1, 1]")
        need(self.trials >= 3, "trials", "must be >= 3")
        need(self.warmup >= 0, "warmup", "must be >= 0")
        return self


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _normalize_key(key: str) -> str:
    key = key.lstrip("-").replace("-", "_")
    return key if key in _FIELDS else key.lower() if key.lower() in _FIELDS else key


def _coerce(name: str, value: Any) -> Any:
    default = getattr(RunConfig, name, None)
    if value is None:
        return None
    try:
        if name == "channel_mult":
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            return tuple(int(v) for v in value)
        if isinstance(default, bool):
            if isinstance(value, str):
                return value.lower() in ("1", "true", "yes")
            return bool(value)
        if isinstance(default, int) or name == "cache_N":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("not an integer")
            return int(value)
        if isinstance(default, float) or name in ("center", "power"):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(name, f"cannot interpret {value!r}") from None


def load_config_file(path: str | Path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path} is not valid JSON ({exc})") from None
    if isinstance(raw, dict) and isinstance(raw.get("config"), dict):
        raw = raw["config"]  # a run manifest
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a JSON object")
    return raw


def resolve(file_values: Mapping[str, Any] | None, overrides: Mapping[str, Any]) -> RunConfig:
    """Build a validated config from file values with non-None ``overrides`` on top."""
    merged: dict[str, Any] = {}
    for source in (file_values or {}), {k: v for k, v in overrides.items() if v is not None}:
        for key, value in source.items():
            name = _normalize_key(key)
            if name not in _FIELDS:
                raise ConfigError(key, "unknown configuration field")
            merged[name] = _coerce(name, value)
    return RunConfig(**merged).validate()
