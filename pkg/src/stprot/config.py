"""Training configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any, Optional

from .errors import ConfigError

GRAPH_KINDS = ("knn", "spatial_radius")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training run.

    Defaults: Adam at lr 1e-4 with weight decay 1e-4, 12000 full-graph
    epochs, loss weights 5 (RNA) and 3 (protein), and a k=3 KNN feature graph.
    """

    lr: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 12000
    beta1_loss: float = 5.0
    beta2_loss: float = 3.0
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    heads: int = 1
    hidden: tuple[int, int] = (64, 64)
    k_neighbors: int = 3
    graph_kind: str = "knn"
    radius: float = 2.0
    tied: bool = True
    seed: int = 0
    log_every: int = 500
    patience: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.beta1_loss < 0 or self.beta2_loss < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.beta1_loss == 0 and self.beta2_loss == 0:
            raise ConfigError("loss weights cannot both be 0")
        if self.heads < 1:
            raise ConfigError("heads must be >= 1")
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise ConfigError(f"hidden must be two positive widths, got {self.hidden}")
        if self.k_neighbors < 1:
            raise ConfigError("k_neighbors must be >= 1")
        if self.graph_kind not in GRAPH_KINDS:
            raise ConfigError(f"graph_kind must be one of {GRAPH_KINDS}")
        if self.radius < 0:
            raise ConfigError("radius must be >= 0")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not (0 <= self.adam_b1 < 1 and 0 <= self.adam_b2 < 1 and self.adam_eps > 0):
            raise ConfigError("invalid Adam moment parameters")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class LossWeights:
    beta1: float
    beta2: float

    def __post_init__(self):
        if self.beta1 < 0 or self.beta2 < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.beta1 == 0 and self.beta2 == 0:
            raise ConfigError("loss weights cannot both be 0")

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "LossWeights":
        return cls(cfg.beta1_loss, cfg.beta2_loss)


__all__ = ["TrainConfig", "LossWeights", "GRAPH_KINDS"]
