"""Prototype-anchored contrastive domain adaptation for segmentation on synthetic scenes."""
from .numerics import Tensor, no_grad
from .training import TrainConfig, train

__all__ = ["Tensor", "no_grad", "TrainConfig", "train"]
__version__ = "0.1.0"
