"""Model and training configuration, with the desk and paper profiles."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VARIANTS = ("full", "pomo_only", "choice_only", "choice_free", "choice_avg_tracking")


@dataclass
class ModelConfig:
    d: int = 64
    n_heads: int = 4
    enc_layers: int = 3
    glimpse_layers: int = 2
    n_clusters: int = 5
    cluster_iters: int = 5
    clip: float = 10.0
    variant: str = "full"
    ff_mult: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.n_clusters < 1 or self.cluster_iters < 1:
            raise ValueError("n_clusters and cluster_iters must be >= 1")
        if self.enc_layers < 0 or self.glimpse_layers < 0:
            raise ValueError("layer counts must be non-negative")

    @property
    def uses_clusters(self) -> bool:
        return self.variant == "full"

    @property
    def choice(self) -> str:
        """How the pointer query is modulated: 'none', 'hyper' or 'free'."""
        return {"pomo_only": "none", "choice_free": "free"}.get(self.variant, "hyper")

    @property
    def context(self) -> str:
        """Context source: 'sum' (last + first), 'clusters' or 'average'."""
        return {"full": "clusters", "choice_avg_tracking": "average"}.get(self.variant, "sum")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    n: int = 20
    epochs: int = 10
    episodes_per_epoch: int = 20_000
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    grad_clip: float = 10.0
    seed: int = 1234
    source: str = "uniform"
    dataset_limit: int | None = None
    eval_testset: str | None = None
    eval_size: int = 128
    eval_batch: int = 64
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        for name in ("n", "epochs", "episodes_per_epoch", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.grad_clip <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and grad_clip must be positive, weight_decay >= 0")
        if self.n < 3:
            raise ValueError("training instances need n >= 3")
        if self.dataset_limit is not None and self.dataset_limit <= 0:
            raise ValueError("dataset_limit must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def profile(name: str, **overrides) -> TrainConfig:
    """Named presets: ``paper`` is the full-size setting (n=100, d=128, six
    encoder layers); ``desk`` is the single-CPU scale-down."""
    if name == "desk":
        base = dict(model=ModelConfig(d=64, n_heads=4, enc_layers=3), n=20, epochs=10,
                    episodes_per_epoch=20_000, batch_size=32)
    elif name == "paper":
        base = dict(model=ModelConfig(d=128, n_heads=8, enc_layers=6), n=100, epochs=200,
                    episodes_per_epoch=100_000, batch_size=128)
    else:
        raise ValueError(f"unknown profile {name!r}")
    model_over = overrides.pop("model", None) or {}
    if isinstance(model_over, ModelConfig):
        model_over = dataclasses.asdict(model_over)
    base["model"] = dataclasses.replace(base["model"], **model_over)
    base.update(overrides)
    return TrainConfig(**base)
