"""Geometry-guided face reenactment at desk scale.

A toy FLAME-style head model, a software rasterizer for guidance maps, a
progressive-warping generator with SPADE conditioning, its adversarial
training loop, and reenactment/editing/evaluation drivers.
"""

from .data import SyntheticDataset, gen_dataset
from .estimator import FaceReenactor
from .face_model import FaceParams, HeadAsset, lbs, make_toy_asset
from .network import FaceAnimator, GeneratorConfig
from .training import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "FaceAnimator", "FaceParams", "FaceReenactor", "GeneratorConfig", "HeadAsset", "SyntheticDataset",
    "TrainConfig", "Trainer", "gen_dataset", "lbs", "make_toy_asset",
]
