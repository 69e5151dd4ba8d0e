"""Objective terms: reconstruction error, soft/hard hypersphere losses,
the Gaussian-prior KL penalty, weight decay, and the per-variant totals.

All functions take graph Tensors and return scalar Tensors, so the
training loop can differentiate any combination.  The hypersphere
center is a frozen constant (never a gradient leaf); the soft-boundary
radius is owned by the quantile update rule in the training module, not
by gradient descent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ContractError,
    ShapeError,
    Tensor,
    log,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    square,
    sub,
)

KL_MODES = ("batch_moments", "per_sample")
KL_VAR_EPS = 1e-8  # guards log() when a latent dimension collapses to constant


@dataclass
class HypersphereState:
    """Center, radius and slack fraction of the one-class hypersphere."""

    center: np.ndarray
    radius: float = 0.0
    nu: float = 0.1

    def __post_init__(self):
        if self.radius < 0:
            raise ContractError(f"radius must be >= 0, got {self.radius}")
        if not 0 < self.nu <= 1:
            raise ContractError(f"nu must lie in (0, 1], got {self.nu}")


@dataclass
class LossWeights:
    """Trade-off weights: lambda1 (KL), lambda2 (reconstruction; plays
    the role of alpha for the plain autoencoder+SVDD variant), lambda3
    (weight decay)."""

    lambda1: float = 0.0
    lambda2: float = 0.0
    lambda3: float = 0.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be nonnegative")


def rec_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Mean over samples of the squared l2 reconstruction error."""
    if x.data.shape != x_hat.data.shape:
        raise ShapeError(f"shape mismatch {x.data.shape} vs {x_hat.data.shape}")
    n = x.data.shape[0]
    return reduce_sum(square(sub(x, x_hat))) * (1.0 / n)


def _center_distances_sq(z_hat: Tensor, center: np.ndarray) -> Tensor:
    if z_hat.data.ndim != 2:
        raise ShapeError(f"latent batch must be 2-D, got {z_hat.data.shape}")
    if z_hat.data.shape[1] != center.shape[0]:
        raise ShapeError(
            f"latent dim {z_hat.data.shape[1]} != center dim {center.shape[0]}"
        )
    c = center.astype(z_hat.data.dtype, copy=False)
    return reduce_sum(square(sub(z_hat, c)), axes=1)


def svdd_soft(z_hat: Tensor, hs: HypersphereState) -> Tensor:
    """R^2 + (1/(nu*n)) * sum(hinge(dist^2 - R^2)); excludes weight decay."""
    n = z_hat.data.shape[0]
    if n < 1:
        raise ContractError("empty batch")
    d2 = _center_distances_sq(z_hat, hs.center)
    r2 = float(hs.radius) ** 2
    hinge = relu(d2 - r2)
    return reduce_sum(hinge) * (1.0 / (hs.nu * n)) + r2


def svdd_hard(z_hat: Tensor, hs: HypersphereState) -> Tensor:
    """Mean squared distance of the latent batch to the center."""
    if z_hat.data.shape[0] < 1:
        raise ContractError("empty batch")
    return reduce_mean(_center_distances_sq(z_hat, hs.center))


def kl_loss(z_hat: Tensor, mode: str = "batch_moments") -> Tensor:
    """Divergence of the latent batch from a standard Gaussian.

    batch_moments (default): per-dimension empirical mean/biased
    variance plugged into the closed-form Gaussian KL,
    sum_d 0.5*(v + mu^2 - 1 - ln(v + eps)).  per_sample: each vector
    read as the mean of a unit-variance Gaussian, reducing to
    mean_i 0.5*||z_i||^2.
    """
    if mode not in KL_MODES:
        raise ContractError(f"unknown kl mode {mode!r}; one of {KL_MODES}")
    n, _ = z_hat.data.shape
    if mode == "per_sample":
        return reduce_sum(square(z_hat)) * (0.5 / n)
    if n < 2:
        raise ContractError("batch_moments KL needs a batch of at least 2")
    mu = reduce_mean(z_hat, axes=0)
    var = reduce_mean(square(sub(z_hat, mu)), axes=0)
    terms = sub(var + square(mu), log(var + KL_VAR_EPS) + 1.0)
    return reduce_sum(terms) * 0.5


def weight_decay(weights) -> Tensor:
    """Half the summed squared Frobenius norms of the given weight
    tensors (biases and batch-norm parameters are excluded upstream)."""
    weights = list(weights)
    if not weights:
        raise ContractError("no weight tensors given")
    total = reduce_sum(square(weights[0]))
    for w in weights[1:]:
        total = total + reduce_sum(square(w))
    return total * 0.5


VARIANT_TERMS = {
    # variant -> (svdd, kl, rec, decay) term inclusion
    "cae": (False, False, True, False),
    "dsvdd": (True, False, False, True),
    "iaead": (True, False, True, True),
    "dsvdd_kl": (True, True, False, True),
    "dlsvdd": (True, False, False, True),
    "dlsvdd_kl": (True, True, False, True),
    "iae_kl": (True, True, True, True),
    "iae_lstm": (True, False, True, True),
    "iae_lstm_kl": (True, True, True, True),
}


def total_loss(
    variant: str,
    boundary: str,
    weights_list,
    w: LossWeights,
    hs: HypersphereState | None,
    x: Tensor | None = None,
    x_hat: Tensor | None = None,
    z_hat: Tensor | None = None,
    kl_mode: str = "batch_moments",
):
    """Assemble the variant's objective; returns (total, parts).

    parts maps term name -> scalar Tensor for the terms the variant
    uses (svdd, kl, rec, decay), before lambda scaling except svdd.
    """
    if variant not in VARIANT_TERMS:
        raise ContractError(
            f"unknown variant {variant!r}; one of {sorted(VARIANT_TERMS)}"
        )
    if boundary not in ("soft", "hard"):
        raise ContractError(f"boundary must be 'soft' or 'hard', got {boundary!r}")
    use_svdd, use_kl, use_rec, use_decay = VARIANT_TERMS[variant]
    parts: dict[str, Tensor] = {}
    total = None

    def accumulate(term):
        nonlocal total
        total = term if total is None else total + term

    if use_svdd:
        if z_hat is None or hs is None:
            raise ContractError(f"variant {variant} needs z_hat and hypersphere state")
        svdd = svdd_soft(z_hat, hs) if boundary == "soft" else svdd_hard(z_hat, hs)
        parts["svdd"] = svdd
        accumulate(svdd)
    if use_kl:
        if z_hat is None:
            raise ContractError(f"variant {variant} needs z_hat")
        kl = kl_loss(z_hat, mode=kl_mode)
        parts["kl"] = kl
        accumulate(mul(kl, w.lambda1))
    if use_rec:
        if x is None or x_hat is None:
            raise ContractError(f"variant {variant} needs x and x_hat")
        rec = rec_loss(x, x_hat)
        parts["rec"] = rec
        if variant == "cae":
            accumulate(rec)
        else:
            accumulate(mul(rec, w.lambda2))
    if use_decay:
        decay = weight_decay(weights_list)
        parts["decay"] = decay
        accumulate(mul(decay, w.lambda3))
    return total, parts
