"""Signed distance to volumetric density, and the annealing schedule for its scale.

Density is the Laplace CDF of the negated signed distance, scaled by
``alpha = 1/beta``: deep inside an object it saturates at ``alpha``, in free
space it decays to zero, and the transition width is controlled by ``beta``.
``beta`` is annealed from a soft start toward a sharp final value over the
course of training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["DensityParams", "density_from_sdf", "density_dsdf", "BetaSchedule", "beta_at"]


@dataclass(frozen=True)
class DensityParams:
    """Laplace scale ``beta`` with the density amplitude pinned to ``1/beta``."""

    beta: float

    def __post_init__(self) -> None:
        if not self.beta > 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")

    @property
    def alpha(self) -> float:
        return 1.0 / self.beta


def density_from_sdf(f_val, params: DensityParams):
    """Density ``alpha * Psi_beta(-f)`` for distances ``f`` positive outside.

    ``Psi_beta`` is the CDF of a zero-mean Laplace distribution, so the value
    is ``alpha/2`` exactly on the surface, tends to ``alpha`` deep inside
    (f << -beta) and to 0 far outside (f >> beta).
    """
    f = np.asarray(f_val)
    b = params.beta
    inside = 1.0 - 0.5 * np.exp(np.minimum(f, 0.0) / b)
    outside = 0.5 * np.exp(-np.maximum(f, 0.0) / b)
    return params.alpha * np.where(f < 0.0, inside, outside)


def density_dsdf(f_val, params: DensityParams):
    """Derivative of :func:`density_from_sdf` with respect to the distance value."""
    f = np.asarray(f_val)
    b = params.beta
    return -(params.alpha / (2.0 * b)) * np.exp(-np.abs(f) / b)


@dataclass(frozen=True)
class BetaSchedule:
    """Monotone anneal from ``beta0`` at t=0 to ``beta1`` at t=1."""

    beta0: float = 0.1
    beta1: float = 0.001
    exponent: float = 0.8

    def __post_init__(self) -> None:
        if not (self.beta0 >= self.beta1 > 0.0):
            raise ValueError(f"need beta0 >= beta1 > 0, got {self.beta0}, {self.beta1}")


def beta_at(schedule: BetaSchedule, t: float) -> float:
    """Evaluate ``beta0 * (1 + (beta0-beta1)/beta1 * t^e)^-1`` at progress t in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"schedule progress must lie in [0, 1], got {t}")
    b0, b1 = schedule.beta0, schedule.beta1
    return b0 / (1.0 + (b0 - b1) / b1 * t**schedule.exponent)
