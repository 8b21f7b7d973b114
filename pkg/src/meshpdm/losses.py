"""Training objectives: two-way Chamfer (L1/L2), vertex MSE, the combined
correspondence loss, and the order-preserving VAE objective.

All functions build autodiff graphs over :class:`~meshpdm.tensor.Tensor`
inputs. Nearest-neighbor selection inside the Chamfer terms is treated as
locally constant (correct away from ties; ties break toward the lowest
index).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ValidationError
from .tensor import Tensor, _coerce, gather


@dataclass
class LossWeights:
    """Weights of the unsquared-Chamfer and vertex-MSE terms."""

    alpha: float
    gamma: float

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and np.isfinite(self.gamma)):
            raise ValidationError("loss weights must be finite")
        if self.alpha < 0 or self.gamma < 0:
            raise ValidationError("loss weights must be non-negative")


class CorrespondenceLoss(NamedTuple):
    total: Tensor
    chamfer_l2: Tensor
    chamfer_l1: Tensor
    vertex_mse: Tensor


class VaeLoss(NamedTuple):
    total: Tensor
    reconstruction: Tensor
    kl: Tensor


def _nearest_indices(a: np.ndarray, b: np.ndarray):
    """Per-row argmin of pairwise squared distance in both directions.

    np.argmin picks the first (lowest-index) minimizer, which is the
    documented tie rule.
    """
    sa = np.einsum("ij,ij->i", a, a)
    sb = np.einsum("ij,ij->i", b, b)
    d2 = sa[:, None] + sb[None, :] - 2.0 * (a @ b.T)
    return np.argmin(d2, axis=1), np.argmin(d2, axis=0)


def _check_points(x: Tensor, name: str) -> None:
    if x.ndim != 2 or x.shape[1] != 3 or x.shape[0] == 0:
        raise ValidationError(f"{name} must be a non-empty (m, 3) point set, got {x.shape}")


def two_way_chamfer(a, b, norm: str = "l2") -> Tensor:
    """Mean nearest-neighbor distance from a to b plus the reverse direction.

    ``l2`` uses squared Euclidean point distances, ``l1`` unsquared Euclidean.
    Differentiable with respect to both point sets.
    """
    if norm not in ("l1", "l2"):
        raise ValidationError(f"norm must be 'l1' or 'l2', got {norm!r}")
    a, b = _coerce(a), _coerce(b)
    _check_points(a, "a")
    _check_points(b, "b")
    ia, ib = _nearest_indices(a.data, b.data)

    def direction(src: Tensor, dst: Tensor, idx: np.ndarray) -> Tensor:
        diff = src - gather(dst, idx)
        d2 = (diff * diff).sum(axis=1)
        return d2.mean() if norm == "l2" else d2.sqrt().mean()

    return direction(a, b, ia) + direction(b, a, ib)


def vertex_mse(v, v_hat) -> Tensor:
    """Mean squared coordinate difference between same-ordered vertex sets."""
    v, v_hat = _coerce(v), _coerce(v_hat)
    if v.shape != v_hat.shape:
        raise ValidationError(f"vertex sets differ in shape: {v.shape} vs {v_hat.shape}")
    diff = v - v_hat
    return (diff * diff).mean()


def correspondence_loss(vertices, correspondences, vertices_hat,
                        weights: LossWeights) -> CorrespondenceLoss:
    """Squared-Chamfer + alpha * unsquared-Chamfer + gamma * vertex MSE.

    Returns the weighted total together with the three unweighted terms for
    logging; total == chamfer_l2 + alpha*chamfer_l1 + gamma*vertex_mse.
    """
    l2 = two_way_chamfer(vertices, correspondences, norm="l2")
    l1 = two_way_chamfer(vertices, correspondences, norm="l1")
    mse = vertex_mse(vertices, vertices_hat)
    total = l2 + weights.alpha * l1 + weights.gamma * mse
    return CorrespondenceLoss(total, l2, l1, mse)


def gaussian_kl(mu, log_var) -> Tensor:
    """KL divergence of N(mu, exp(log_var)) from the standard normal prior.

    Sums over the trailing (feature) axis; with a leading batch axis the
    per-sample KLs are averaged.
    """
    mu, log_var = _coerce(mu), _coerce(log_var)
    if mu.shape != log_var.shape:
        raise ValidationError(f"mu/log_var shape mismatch: {mu.shape} vs {log_var.shape}")
    per = (0.5 * (mu * mu + log_var.exp() - 1.0 - log_var)).sum(axis=-1)
    return per if per.ndim == 0 else per.mean()


def vae_loss(c, c_hat, mu, log_var, beta: float = 1.0) -> VaeLoss:
    """Order-preserving reconstruction MSE plus beta-weighted Gaussian KL.

    ``c`` and ``c_hat`` must have identical shapes (index order carries the
    correspondence, so no Chamfer here). A unit-variance Gaussian likelihood
    realizes the reconstruction term as plain MSE.
    """
    c, c_hat = _coerce(c), _coerce(c_hat)
    if c.shape != c_hat.shape:
        raise ValidationError(f"correspondence shapes differ: {c.shape} vs {c_hat.shape}")
    diff = c - c_hat
    recon = (diff * diff).mean()
    kl = gaussian_kl(mu, log_var)
    total = recon + beta * kl
    return VaeLoss(total, recon, kl)
