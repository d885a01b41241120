"""Switching paths, loss matrices and the (penalized) negative log-likelihood."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .data import CovariatePanel, ExcessPanel
from .errors import DataError
from .regression import Design, RegimeParameters, build_design


@dataclass
class SwitchingPath:
    """Per-location regime label sequences."""

    labels: list[np.ndarray]

    def __post_init__(self):
        self.labels = [np.asarray(r, dtype=np.int64) for r in self.labels]

    def flat(self) -> np.ndarray:
        if not self.labels:
            return np.zeros(0, np.int64)
        return np.concatenate(self.labels)

    def switch_counts(self) -> list[int]:
        return [switch_count(r) for r in self.labels]

    def total_switches(self) -> int:
        return int(sum(self.switch_counts()))

    def validate(self, K: int, C: int | None = None, lengths=None):
        for s, r in enumerate(self.labels):
            if len(r) and (r.min() < 0 or r.max() >= K):
                raise DataError(f"location {s}: regime labels must lie in 0..{K - 1}")
            if lengths is not None and len(r) != lengths[s]:
                raise DataError(f"location {s}: path length {len(r)} != series length {lengths[s]}")
            if C is not None and switch_count(r) > C:
                raise DataError(f"location {s}: {switch_count(r)} switches exceed budget {C}")

    def relabeled(self, mapping) -> "SwitchingPath":
        """Apply ``new = mapping[old]`` to every label."""
        mapping = np.asarray(mapping)
        return SwitchingPath([mapping[r] for r in self.labels])

    @classmethod
    def from_flat(cls, flat, offsets) -> "SwitchingPath":
        return cls([flat[offsets[s]:offsets[s + 1]].copy() for s in range(len(offsets) - 1)])


def bv_norm(gamma) -> int:
    """Total variation of a binary indicator sequence."""
    g = np.asarray(gamma, dtype=np.int64)
    return int(np.abs(np.diff(g)).sum())


def switch_count(labels) -> int:
    r = np.asarray(labels)
    return int(np.count_nonzero(r[1:] != r[:-1]))


def indicator(labels, k: int) -> np.ndarray:
    return (np.asarray(labels) == k).astype(np.int64)


def design_loss_matrix(d: Design, theta: RegimeParameters) -> np.ndarray:
    """(N, K) matrix of -log h over all stacked points; +inf where infeasible."""
    L = np.empty((d.n, theta.K))
    col = np.empty(d.n)
    for k in range(theta.K):
        _kernels.point_losses(d.y, d.X, theta.regime_vector(k), col)
        L[:, k] = col
    return L


def build_loss_matrix(panel: ExcessPanel, covs: CovariatePanel,
                      theta: RegimeParameters) -> list[np.ndarray]:
    """Per-location ``T_s x K`` loss matrices."""
    d = build_design(panel, covs)
    L = design_loss_matrix(d, theta)
    return [L[d.location_slice(s)] for s in range(len(d.locations))]


def assigned_losses(d: Design, theta: RegimeParameters, labels: np.ndarray) -> np.ndarray:
    out = np.empty(d.n)
    buf = np.empty(d.n)
    for k in range(theta.K):
        idx = np.flatnonzero(labels == k)
        if len(idx) == 0:
            continue
        sub = buf[:len(idx)]
        _kernels.point_losses(d.y[idx], d.X[idx], theta.regime_vector(k), sub)
        out[idx] = sub
    return out


def design_nll(d: Design, theta: RegimeParameters, labels: np.ndarray) -> float:
    losses = assigned_losses(d, theta, labels)
    if np.any(np.isinf(losses)):
        return math.inf
    return math.fsum(losses)


def design_penalized(d: Design, theta: RegimeParameters, labels: np.ndarray, lam: float,
                     penalize_offsets: bool = True) -> float:
    nll = design_nll(d, theta, labels)
    if lam == 0.0:
        return nll
    return nll + lam * theta.l1_norm(penalize_offsets)


def weighted_nll(panel: ExcessPanel, covs: CovariatePanel, theta: RegimeParameters,
                 paths: SwitchingPath) -> float:
    """Negative log-likelihood with each excess under its assigned regime.

    Summation is exactly rounded (``math.fsum``), so the value does not depend
    on the order in which regimes are processed.
    """
    d = build_design(panel, covs)
    paths.validate(theta.K, lengths=panel.lengths)
    return design_nll(d, theta, paths.flat())


def penalized_nll(panel: ExcessPanel, covs: CovariatePanel, theta: RegimeParameters,
                  paths: SwitchingPath, lam: float, penalize_offsets: bool = True) -> float:
    """``weighted_nll + lam * ||theta||_1`` (offsets included unless disabled)."""
    if lam < 0:
        raise DataError("lambda must be >= 0")
    d = build_design(panel, covs)
    paths.validate(theta.K, lengths=panel.lengths)
    return design_penalized(d, theta, paths.flat(), lam, penalize_offsets)
