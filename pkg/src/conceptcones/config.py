"""Experiment configuration: JSON file, flag overrides and a stable hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .dictionary import SIMULTANEOUS, TrainConfig
from .retrieval import GENERAL, SUB_LABEL


@dataclass(frozen=True)
class ExperimentConfig:
    """Training hyperparameters plus evaluation settings.

    ``seed`` is the only source of randomness; it seeds mini-batch shuffles
    and any random initialization. ``protocols`` lists the evaluation
    protocols to run; ``d0_range`` is the inclusive ``(start, stop, step)``
    grid used by the d0 sweep.
    """

    d0: int = 5
    group_sizes: tuple | None = None
    iterations: int = 10
    batch_size: int = 0
    update_mode: str = SIMULTANEOUS
    power_iterations: int = 1
    monotone_check: bool = False
    ridge_lambda: float = 0.0
    init: str = "svd"
    seed: int = 0
    protocols: tuple = (GENERAL, SUB_LABEL)
    k: int = 20
    d0_range: tuple = (1, 20, 1)
    norm_atol: float = 1e-9
    recon_atol: float = 1e-10

    def __post_init__(self):
        for p in self.protocols:
            if p not in (GENERAL, SUB_LABEL):
                raise ValueError(f"unknown protocol {p!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if len(self.d0_range) != 3 or self.d0_range[2] < 1 or self.d0_range[0] < 1:
            raise ValueError("d0_range must be (start >= 1, stop, step >= 1)")
        object.__setattr__(self, "protocols", tuple(self.protocols))
        object.__setattr__(self, "d0_range", tuple(int(v) for v in self.d0_range))
        if self.group_sizes is not None:
            object.__setattr__(self, "group_sizes", tuple(int(v) for v in self.group_sizes))
        self.train_config()  # validate the training fields early

    def train_config(self, **overrides) -> TrainConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(TrainConfig) if hasattr(self, f.name)}
        kw["shuffle_seed"] = self.seed
        kw.update(overrides)
        return TrainConfig(**kw)

    def d0_values(self) -> list:
        start, stop, step = self.d0_range
        return list(range(start, stop + 1, step))

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("group_sizes", "protocols", "d0_range"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @property
    def hash(self) -> str:
        """First 16 hex digits of the SHA-256 of the canonical JSON form."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        clean = {k: v for k, v in overrides.items() if v is not None}
        unknown = set(clean) - {f.name for f in fields(self)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **clean)

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
