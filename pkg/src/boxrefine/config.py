"""Training/pipeline configuration shared by the model, trainer and CLI."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .geometry import SamplerGrid

STAGE2_SOURCES = ("noisy", "stage1", "refined")


@dataclass(frozen=True)
class LossWeights:
    basic: float = 1.0
    alpha_II: float = 1.0
    alpha_1_spsd: float = 0.25
    alpha_2_sisd: float = 0.25
    alpha_3_det: float = 4.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    # optimisation
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_decay_epochs: tuple[int, ...] | None = None
    lr_decay_factor: float = 0.1
    grad_clip: float | None = 10.0
    seed: int = 0
    # module toggles
    use_spsd: bool = True
    use_sisd: bool = True
    use_det: bool = True
    # bag construction and selection
    grid: SamplerGrid = field(default_factory=SamplerGrid)
    k_stage1: int = 3
    k_stage2: int = 3
    stage2_bag_source: str = "noisy"
    negative_candidates: int = 500
    negative_iou_max: float = 0.3
    max_negatives: int | None = 64
    # architecture
    num_classes: int = 3
    backbone_channels: tuple[int, ...] = (16, 32, 32, 32)
    feature_dim: int = 64
    pool_size: int = 7
    sampling_ratio: int = 2
    ore_mode: str = "add"
    # losses
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    det_iou: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")
        if self.learning_rate <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning_rate must be positive and momentum in [0, 1)")
        if self.k_stage1 < 1 or self.k_stage2 < 1:
            raise ValueError("k must be at least 1")
        if self.stage2_bag_source not in STAGE2_SOURCES:
            raise ValueError(f"stage2_bag_source must be one of {STAGE2_SOURCES}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")

    @property
    def decay_epochs(self) -> tuple[int, ...]:
        """1-based epochs from which the learning rate is multiplied by ``lr_decay_factor`` once more.

        The derived schedule never decays the first epoch.
        """
        if self.lr_decay_epochs is not None:
            return tuple(self.lr_decay_epochs)
        if self.epochs == 0:
            return ()
        return tuple(max(2, math.ceil(f * self.epochs)) for f in (0.67, 0.92))

    def lr_at(self, epoch: int) -> float:
        n = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.learning_rate * self.lr_decay_factor ** n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        for key in ("backbone_channels", "lr_decay_epochs"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "grid" in d and isinstance(d["grid"], dict):
            d["grid"] = SamplerGrid.from_dict(d["grid"])
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        for key in ("backbone_channels", "lr_decay_epochs"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    def updated(self, **changes) -> "TrainConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


def load_config(path) -> dict:
    """Read a JSON config file into a plain dict (sections ``train`` and ``data`` are optional)."""
    with open(Path(path), encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return doc
