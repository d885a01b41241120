"""Per-regime affine models for the GPD shape and scale, and feasibility checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import CovariatePanel, ExcessPanel
from .errors import DataError
from .gpd import XI_BOUND

CONSTRAINT_SIGMA = "sigma positivity"
CONSTRAINT_XI = "xi range"
CONSTRAINT_SUPPORT = "support"


@dataclass
class RegimeParameters:
    """Coefficients of K regimes; row ``k`` holds (offset, slope_1..slope_P)."""

    xi: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.xi = np.atleast_2d(np.asarray(self.xi, dtype=float))
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if self.xi.shape != self.sigma.shape:
            raise DataError("shape and scale coefficient arrays must have the same shape")

    @property
    def K(self) -> int:
        return self.xi.shape[0]

    @property
    def P(self) -> int:
        return self.xi.shape[1] - 1

    def regime_vector(self, k: int) -> np.ndarray:
        """Flat (xi_0..xi_P, sigma_0..sigma_P) vector of regime ``k``."""
        return np.concatenate([self.xi[k], self.sigma[k]])

    def with_regime(self, k: int, vec) -> "RegimeParameters":
        q = self.P + 1
        xi, sigma = self.xi.copy(), self.sigma.copy()
        xi[k], sigma[k] = vec[:q], vec[q:]
        return RegimeParameters(xi, sigma)

    def permuted(self, order) -> "RegimeParameters":
        """New regime ``i`` is old regime ``order[i]``."""
        order = np.asarray(order)
        return RegimeParameters(self.xi[order], self.sigma[order])

    def copy(self) -> "RegimeParameters":
        return RegimeParameters(self.xi.copy(), self.sigma.copy())

    def l1_norm(self, include_offsets: bool = True) -> float:
        if include_offsets:
            return float(np.abs(self.xi).sum() + np.abs(self.sigma).sum())
        return float(np.abs(self.xi[:, 1:]).sum() + np.abs(self.sigma[:, 1:]).sum())

    @classmethod
    def offsets(cls, xi, sigma, P: int = 0) -> "RegimeParameters":
        """Regimes with the given offsets and zero slopes."""
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
        a = np.zeros((len(xi), P + 1))
        b = np.zeros((len(sigma), P + 1))
        a[:, 0], b[:, 0] = xi, sigma
        return cls(a, b)


def eval_params(xi_coeffs, sigma_coeffs, u):
    """Shape and scale of one regime at covariate vector ``u`` (no clamping).

    Works row-wise when ``u`` is a (n, P) matrix.
    """
    xi_coeffs = np.asarray(xi_coeffs, dtype=float)
    sigma_coeffs = np.asarray(sigma_coeffs, dtype=float)
    u = np.asarray(u, dtype=float)
    P = len(xi_coeffs) - 1
    if len(sigma_coeffs) != P + 1 or u.shape[-1:] != (P,):
        raise DataError(f"dimension mismatch: {P} slopes but covariate vector of shape {u.shape}")
    return xi_coeffs[0] + u @ xi_coeffs[1:], sigma_coeffs[0] + u @ sigma_coeffs[1:]


class Design(NamedTuple):
    """Panels stacked in location order: ``X`` has a leading column of ones."""

    y: np.ndarray
    X: np.ndarray
    offsets: np.ndarray
    locations: list
    times: np.ndarray

    @property
    def n(self) -> int:
        return len(self.y)

    def location_slice(self, s: int) -> slice:
        return slice(int(self.offsets[s]), int(self.offsets[s + 1]))


def build_design(panel: ExcessPanel, covs: CovariatePanel) -> Design:
    if len(covs.values) != panel.n_locations:
        raise DataError("covariate panel does not match the excess panel locations")
    P = covs.n_covariates
    for loc, y, u in zip(panel.locations, panel.excesses, covs.values):
        if u.shape != (len(y), P):
            raise DataError(f"{loc}: covariate rows not aligned with excesses")
    y = np.concatenate(panel.excesses) if panel.n_total else np.zeros(0)
    U = np.concatenate(covs.values, axis=0) if panel.n_total else np.zeros((0, P))
    X = np.ascontiguousarray(np.column_stack([np.ones(len(y)), U]))
    offsets = np.concatenate([[0], np.cumsum(panel.lengths)]).astype(np.int64)
    times = np.concatenate(panel.times) if panel.n_total else np.zeros(0, np.int64)
    return Design(np.ascontiguousarray(y), X, offsets, list(panel.locations), times)


class Violation(NamedTuple):
    location: str
    time: int
    regime: int
    constraint: str


class Feasibility(NamedTuple):
    ok: bool
    violation: Violation | None

    def __bool__(self):
        return self.ok


def _violations(y, xi, sigma):
    """Constraint code per point: 0 ok, 1 sigma, 2 xi range, 3 support."""
    code = np.zeros(len(y), dtype=np.int8)
    with np.errstate(divide="ignore", invalid="ignore"):
        support = ~(1.0 + xi * y / sigma > 0)
    code[support] = 3
    code[~((-XI_BOUND < xi) & (xi < XI_BOUND))] = 2
    code[~(sigma > 0)] = 1
    return code


_NAMES = {1: CONSTRAINT_SIGMA, 2: CONSTRAINT_XI, 3: CONSTRAINT_SUPPORT}


def feasibility_check(theta: RegimeParameters, panel: ExcessPanel, covs: CovariatePanel,
                      assignment=None) -> Feasibility:
    """Check sigma > 0, xi in (-0.5, 0.5) and 1 + xi*y/sigma > 0.

    Without ``assignment`` every regime is checked at every excess; with a
    :class:`~fembv_gpd.objective.SwitchingPath` only the assigned regime per
    point. The first violation in (location, time, regime) order is reported.
    """
    d = build_design(panel, covs)
    if theta.P != d.X.shape[1] - 1:
        raise DataError("theta and covariate panel disagree on the number of covariates")
    codes = np.zeros((d.n, theta.K), dtype=np.int8)
    for k in range(theta.K):
        xi = d.X @ theta.xi[k]
        sigma = d.X @ theta.sigma[k]
        codes[:, k] = _violations(d.y, xi, sigma)
    if assignment is not None:
        labels = assignment.flat()
        mask = np.zeros_like(codes, dtype=bool)
        mask[np.arange(d.n), labels] = True
        codes = np.where(mask, codes, 0)
    bad = np.argwhere(codes > 0)
    if len(bad) == 0:
        return Feasibility(True, None)
    i, k = bad[0]
    s = int(np.searchsorted(d.offsets, i, side="right") - 1)
    return Feasibility(False, Violation(d.locations[s], int(d.times[i]), int(k),
                                        _NAMES[int(codes[i, k])]))
