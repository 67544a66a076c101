"""Refine noisy bounding-box annotations with a two-stage MIL refiner."""
from .config import LossWeights, TrainConfig
from .geometry import BoundingBox, NoiseSpec, SamplerGrid, UnselectableBagError

__version__ = "0.1.0"

__all__ = ["BoundingBox", "LossWeights", "NoiseSpec", "SamplerGrid", "TrainConfig", "UnselectableBagError"]
