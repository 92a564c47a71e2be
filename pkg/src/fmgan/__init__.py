"""Desk-scale lab for feature-matching conditional VAE-GAN training."""

from .losses import LossWeights
from .models import ModelConfig
from .tensor import Tensor
from .trainers import TrainRunConfig

__all__ = ["LossWeights", "ModelConfig", "Tensor", "TrainRunConfig"]
__version__ = "0.1.0"
