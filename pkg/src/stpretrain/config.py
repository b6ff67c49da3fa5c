"""Run configuration: one flat key/value mapping, stored as YAML."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Union

import yaml


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


@dataclass
class Config:
    # model
    d: int = 64
    d_prime: int = 16
    h_t: int = 8
    h_s: int = 10
    h_m: int = 16
    blocks: int = 2
    temporal_per_block: int = 2
    routing_iters: int = 2
    routing_norm: str = "regions"
    slope: float = 0.01
    window: int = 12
    # pre-training
    epochs: int = 50
    lr: float = 0.01
    optimizer: str = "sgd"
    lam: float = 0.1
    mask_ratio: float = 0.25
    gamma: float = 1.0
    mask_mode: str = "adaptive"
    batch_size: int = 32
    stride: int = 12
    clip_norm: float = 5.0
    kl_eps: float = 1e-12
    split_train: float = 0.6
    split_val: float = 0.2
    seed: int = 0
    # downstream
    horizon: int = 12
    ds_epochs: int = 30
    ds_lr: float = 0.003
    ds_stride: int = 4
    mape_eps: float = 1e-3

    def validate(self) -> "Config":
        positive = ("d", "d_prime", "h_t", "h_s", "h_m", "blocks", "temporal_per_block",
                    "routing_iters", "window", "batch_size", "stride", "horizon", "ds_stride")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0 or self.ds_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if not 0.0 < self.slope < 1.0:
            raise ConfigError(f"slope must lie in (0, 1), got {self.slope}")
        if self.lr < 0 or self.ds_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.routing_norm not in ("regions", "clusters"):
            raise ConfigError(f"routing_norm must be 'regions' or 'clusters', got {self.routing_norm!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.mask_mode not in ("adaptive", "random"):
            raise ConfigError(f"mask_mode must be 'adaptive' or 'random', got {self.mask_mode!r}")
        if not (0 < self.split_train < 1 and 0 < self.split_val < 1
                and self.split_train + self.split_val < 1):
            raise ConfigError("split fractions must be positive and leave room for a test split")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes).validate()

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "Config":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, raw in values.items():
            kind = type(getattr(cls(), key))
            try:
                kwargs[key] = kind(raw) if kind is not bool else bool(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return cls(**kwargs).validate()

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def load_config(path: Union[str, Path, None]) -> Config:
    if path is None:
        return Config().validate()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file must hold a flat mapping: {path}")
    return Config.from_dict(data)


def tiny_config(**overrides) -> Config:
    """The small configuration used for gradient checks."""
    base = dict(d=8, d_prime=4, h_t=2, h_s=3, h_m=2, blocks=1, routing_iters=2,
                window=4, lam=0.1)
    base.update(overrides)
    return Config(**base).validate()
