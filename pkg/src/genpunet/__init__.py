"""Probabilistic U-Net with axis-aligned, full-covariance and mixture latent spaces."""

__version__ = "0.1.0"

from .model import ArchConfig, GenProbUNet, Variant, build_variant, forward_sample, forward_train  # noqa: E402
from .training import TrainConfig, load_checkpoint, save_checkpoint, train  # noqa: E402

__all__ = [
    "ArchConfig",
    "GenProbUNet",
    "TrainConfig",
    "Variant",
    "build_variant",
    "forward_sample",
    "forward_train",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
