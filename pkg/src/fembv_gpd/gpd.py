"""Generalized Pareto density, distribution and quantile functions.

All functions broadcast over numpy arrays. Near ``xi == 0`` (``|xi| <
XI_SWITCH``) the exponential limit is used to avoid cancellation in ``1/xi``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import XI_BOUND, XI_SWITCH
from .errors import DataError

__all__ = [
    "XI_BOUND",
    "XI_SWITCH",
    "GpdPoint",
    "gpd_logpdf",
    "gpd_cdf",
    "gpd_quantile",
]


@dataclass(frozen=True)
class GpdPoint:
    """A single feasible (shape, scale) pair."""

    xi: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise DataError(f"scale must be positive, got {self.sigma}")
        if not -XI_BOUND < self.xi < XI_BOUND:
            raise DataError(f"shape must lie in (-0.5, 0.5), got {self.xi}")


def _check_sigma(sigma):
    sigma = np.asarray(sigma, dtype=float)
    if np.any(~(sigma > 0)):
        raise DataError("scale parameter must be positive")
    return sigma


def gpd_logpdf(y, xi, sigma):
    """Log density of the GPD at ``y > 0``.

    Returns ``-inf`` where ``1 + xi*y/sigma <= 0`` (outside the support).
    Raises :class:`DataError` for ``sigma <= 0`` or ``y <= 0``.
    """
    y = np.asarray(y, dtype=float)
    xi = np.asarray(xi, dtype=float)
    sigma = _check_sigma(sigma)
    if np.any(~(y > 0)):
        raise DataError("excess must be positive")
    y, xi, sigma = np.broadcast_arrays(y, xi, sigma)
    z = xi * y / sigma
    inside = z > -1.0
    small = np.abs(xi) < XI_SWITCH
    with np.errstate(divide="ignore", invalid="ignore"):
        general = -np.log(sigma) - (1.0 / xi + 1.0) * np.log1p(np.where(inside, z, 0.0))
    out = np.where(small, -np.log(sigma) - y / sigma, general)
    out = np.where(inside, out, -np.inf)
    return out[()] if out.ndim == 0 else out


def gpd_cdf(y, xi, sigma):
    """Distribution function; 0 at ``y = 0``, clamped to 1 past the upper endpoint."""
    y = np.asarray(y, dtype=float)
    xi = np.asarray(xi, dtype=float)
    sigma = _check_sigma(sigma)
    if np.any(y < 0):
        raise DataError("cdf argument must be nonnegative")
    y, xi, sigma = np.broadcast_arrays(y, xi, sigma)
    z = xi * y / sigma
    inside = z > -1.0
    small = np.abs(xi) < XI_SWITCH
    with np.errstate(divide="ignore", invalid="ignore"):
        expo = np.log1p(np.where(inside, z, 0.0)) / xi
    expo = np.where(small, y / sigma, expo)
    out = np.where(inside, -np.expm1(-expo), 1.0)
    return out[()] if out.ndim == 0 else out


def gpd_quantile(u, xi, sigma):
    """Inverse of :func:`gpd_cdf` for ``0 <= u < 1``."""
    u = np.asarray(u, dtype=float)
    xi = np.asarray(xi, dtype=float)
    sigma = _check_sigma(sigma)
    if np.any(~((u >= 0) & (u < 1))):
        raise DataError("probability must lie in [0, 1)")
    u, xi, sigma = np.broadcast_arrays(u, xi, sigma)
    e = -np.log1p(-u)  # unit-exponential quantile
    small = np.abs(xi) < XI_SWITCH
    with np.errstate(divide="ignore", invalid="ignore"):
        general = sigma / xi * np.expm1(xi * e)
    out = np.where(small, sigma * e, general)
    return out[()] if out.ndim == 0 else out
