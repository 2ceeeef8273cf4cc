from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError

VARIANTS = ("full", "no_alignment", "no_fusion", "no_gcn", "no_fine", "no_medium", "no_coarse",
            "y_only", "z_only")
TASKS = ("travel_time", "ranking")


@dataclass(frozen=True)
class TrainConfig:
    # model
    d: int = 64
    layers: int = 5
    heads: int = 4
    ffn: int = 0  # 0 -> 4 * d
    dropout: float = 0.1
    patch_side: int = 0  # 0 -> r // 4, i.e. 16 patches per tile
    max_road_len: int = 128
    max_image_len: int = 512
    node_init: str = "random"
    patch_init: str = "random"
    head_hidden: int = 32
    # objective
    mask_ratio: float = 0.15
    lambda_mask: float = 1.0
    lambda_multi: float = 1.0
    lambda_fuse: float = 1.0
    beta: float = 1.0
    sigma_init: float = 0.1
    variant: str = "full"
    # optimisation
    optimizer: str = "adam"
    lr: float = 0.02
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.0
    epochs: int = 60
    batch_size: int = 8
    finetune_lr: float = 1e-3
    finetune_epochs: int = 100
    finetune_batch_size: int = 8
    freeze_encoder: bool = False
    test_fraction: float = 0.25
    # runtime
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        for name in ("lr", "finetune_lr", "sigma_init"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d <= 0 or self.heads <= 0 or self.d % self.heads:
            raise ConfigError(f"d={self.d} must be a positive multiple of heads={self.heads}")
        if min(self.epochs, self.batch_size, self.finetune_batch_size, self.workers) < 1:
            raise ConfigError("epochs, batch sizes and workers must be >= 1")
        if self.layers < 0 or self.finetune_epochs < 0:
            raise ConfigError("layers and finetune_epochs must be non-negative")
        if not 0 <= self.mask_ratio < 1:
            raise ConfigError("mask_ratio must be in [0, 1)")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must be in (0, 1)")
        if self.beta < 0 or not 0 <= self.dropout < 1:
            raise ConfigError("beta must be >= 0 and dropout in [0, 1)")
        if min(self.lambda_mask, self.lambda_multi, self.lambda_fuse) < 0:
            raise ConfigError("loss weights must be non-negative")

    @property
    def ffn_width(self) -> int:
        return self.ffn or 4 * self.d

    def effective(self) -> "TrainConfig":
        """Config with variant-implied weight changes applied."""
        if self.variant == "no_alignment":
            return replace(self, lambda_multi=0.0)
        if self.variant == "no_fusion":
            return replace(self, lambda_fuse=0.0)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# desk-scale settings used by the acceptance suite and the scripts
TINY = TrainConfig(d=64, layers=2, heads=4, dropout=0.0, sigma_init=1.0, lr=1e-3, epochs=200, batch_size=4,
                   finetune_lr=1e-3, finetune_epochs=100, finetune_batch_size=8)
