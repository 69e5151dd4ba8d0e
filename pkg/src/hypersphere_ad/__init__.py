"""One-class anomaly detection with a gated-latent convolutional
autoencoder, a hypersphere (Deep SVDD style) objective, and a
Gaussian-prior KL penalty, built on an in-repo reverse-mode autodiff
tensor core."""

from .autodiff import (
    ContractError,
    DomainError,
    Rng,
    ShapeError,
    Tape,
    Tensor,
    backward,
)
from .losses import HypersphereState, LossWeights

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "DomainError",
    "HypersphereState",
    "LossWeights",
    "Rng",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "__version__",
]
