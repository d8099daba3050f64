"""Gradient-carrier generation from historical weight updates.

Carriers are pairs ``(L, R)`` with orthonormal columns/rows obtained either
from a power-method decomposition of the historical update of a layer, or
drawn at random (the random-subspace baseline).
"""

import numpy as np

from dataclasses import dataclass

from .errors import ConfigError
from .linalg import as_matrix, gram_schmidt_columns, svd_oracle
from .seeding import seeded_rng

__all__ = [
    "CarrierConfig",
    "historical_update",
    "power_decompose",
    "random_carriers",
    "projection_residual",
    "projection_residuals",
    "top_r_factors",
]


@dataclass(frozen=True)
class CarrierConfig:
    """Rank, power-iteration count and seed for carrier generation."""

    rank: int
    power_iters: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("carrier rank must be a positive integer")
        if self.power_iters < 1:
            raise ConfigError("power_iters must be a positive integer")


def historical_update(weight, weight0, step, warmup_steps):
    """Decomposition target for one layer at a given step.

    During warm-up the weight itself is decomposed; afterwards the update
    relative to the initial weight is used.
    """
    if step > warmup_steps:
        return weight - weight0
    return weight.copy()


def power_decompose(delta, cfg, rng=None):
    """Approximate the top-`rank` subspaces of ``delta`` by the power method.

    Starting from a Gaussian ``R``, repeats ``power_iters`` times: form
    ``L = delta R^T``, orthonormalize the columns of ``L``, set
    ``R = L^T delta``; finally the rows of ``R`` are orthonormalized.  Rank
    deficiency (including ``delta == 0``) is absorbed by the random
    orthonormal fill inside the Gram-Schmidt step, so the output always has
    exactly ``rank`` orthonormal columns/rows.
    """
    delta = as_matrix(delta, "delta")
    p, d = delta.shape
    if cfg.rank > min(p, d):
        raise ConfigError(f"rank {cfg.rank} exceeds min{delta.shape}")
    if rng is None:
        rng = seeded_rng(cfg.seed)
    right = rng.standard_normal((cfg.rank, d))
    for _ in range(cfg.power_iters):
        left = delta @ right.T
        left = gram_schmidt_columns(left, rng=rng)
        right = left.T @ delta
    right = gram_schmidt_columns(right.T, rng=rng).T
    return left, right


def random_carriers(p, d, cfg, rng=None):
    """History-independent carriers: orthonormalized Gaussian matrices."""
    if cfg.rank > min(p, d):
        raise ConfigError(f"rank {cfg.rank} exceeds min({p}, {d})")
    if rng is None:
        rng = seeded_rng(cfg.seed)
    left = gram_schmidt_columns(rng.standard_normal((p, cfg.rank)), rng=rng)
    right = gram_schmidt_columns(rng.standard_normal((d, cfg.rank)), rng=rng).T
    return left, right


def projection_residual(grad, left, right):
    """Relative Frobenius mass of ``grad`` outside the carrier subspaces.

    ``|| (I - L L^T) grad (I - R^T R) ||_F / || grad ||_F``
    """
    grad = as_matrix(grad, "grad")
    norm = np.linalg.norm(grad)
    if norm == 0.0:
        raise ValueError("projection residual of a zero gradient is undefined")
    core = grad - left @ (left.T @ grad)
    core = core - (core @ right.T) @ right
    return float(np.linalg.norm(core) / norm)


def projection_residuals(grad, left_hist, right_hist, left_self, right_self):
    """Residuals against historical carriers and the gradient's own factors."""
    historical = projection_residual(grad, left_hist, right_hist)
    self_ = projection_residual(grad, left_self, right_self)
    return historical, self_


def top_r_factors(matrix, rank):
    """Top-`rank` singular factors of a matrix, as carrier-shaped (L, R)."""
    u, _, v = svd_oracle(matrix)
    return u[:, :rank], v[:, :rank].T
