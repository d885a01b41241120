"""Model checks: exponential residuals and QQ envelopes, standard errors from
the observed information, and event-synchronization matrices."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from . import _kernels
from .data import CovariatePanel, ExcessPanel
from .errors import DataError, NumericalError
from .gpd import XI_SWITCH
from .optimizer import FitResult
from .regression import build_design

logger = logging.getLogger(__name__)

STATIONARY = "stationary"


def residual_transform(y, xi, sigma):
    """Map GPD excesses to unit-exponential residuals, ``log(1 + xi y/sigma)/xi``."""
    y, xi, sigma = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (y, xi, sigma)))
    z = xi * y / sigma
    if np.any(~(sigma > 0)) or np.any(~(z > -1.0)) or np.any(y < 0):
        raise DataError("residual transform outside the GPD support")
    small = np.abs(xi) < XI_SWITCH
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(small, y / sigma, np.log1p(z) / xi)
    return out[()] if out.ndim == 0 else out


def fitted_residuals(result: FitResult, panel: ExcessPanel, covs: CovariatePanel) -> np.ndarray:
    """Residuals of every excess under its assigned regime, in panel order."""
    d = build_design(panel, covs)
    labels = result.paths.flat()
    xi = np.einsum("ij,ij->i", d.X, result.theta.xi[labels])
    sigma = np.einsum("ij,ij->i", d.X, result.theta.sigma[labels])
    return residual_transform(d.y, xi, sigma)


def ks_exponential(residuals):
    """One-sample Kolmogorov-Smirnov test against Exp(1)."""
    return stats.kstest(np.asarray(residuals, dtype=float), "expon")


@dataclass
class QqTable:
    theoretical: np.ndarray
    empirical: np.ndarray
    band_lo: np.ndarray
    band_hi: np.ndarray

    @property
    def n(self) -> int:
        return len(self.empirical)

    def inside(self) -> np.ndarray:
        return (self.empirical >= self.band_lo) & (self.empirical <= self.band_hi)


def qq_data(residuals, n_boot: int = 500, level: float = 0.95, rng=None) -> QqTable:
    """Exponential QQ pairs with pointwise simulation envelopes.

    Plotting positions are ``-log(1 - i/(n+1))``. Bands are the
    ``(1-level)/2`` and ``(1+level)/2`` quantiles of each order statistic over
    ``n_boot`` simulated Exp(1) samples of size n.
    """
    r = np.sort(np.asarray(residuals, dtype=float))
    n = len(r)
    if n == 0:
        raise DataError("no residuals")
    if not 0 < level < 1 or n_boot < 1:
        raise DataError("need 0 < level < 1 and n_boot >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    i = np.arange(1, n + 1)
    theo = -np.log1p(-i / (n + 1))
    sims = np.sort(rng.standard_exponential((n_boot, n)), axis=1)
    lo, hi = np.quantile(sims, [(1 - level) / 2, (1 + level) / 2], axis=0)
    return QqTable(theo, r, lo, hi)


@dataclass
class RegimeErrors:
    regime: int
    n_points: int
    se: np.ndarray | None
    not_positive_definite: bool
    hessian: np.ndarray | None = None


@dataclass
class StdErrorReport:
    coefficient_names: list[str]
    regimes: list[RegimeErrors]


def coefficient_names(covariate_names: Sequence[str]) -> list[str]:
    terms = ["offset", *covariate_names]
    return [f"xi:{t}" for t in terms] + [f"sigma:{t}" for t in terms]


# central differences: h = _H_REL * max(1, |coef|), halved up to _H_HALVINGS times
_H_REL = 1e-4
_H_HALVINGS = 6
# eigenvalues below this fraction of the largest count as zero
_EIG_RTOL = 1e-8


def _hessian(f, x):
    base_h = _H_REL * np.maximum(1.0, np.abs(x))
    m = len(x)
    for attempt in range(_H_HALVINGS + 1):
        h = base_h / 2**attempt
        f0 = f(x)
        H = np.empty((m, m))
        ok = math.isfinite(f0)
        for a in range(m):
            if not ok:
                break
            ea = np.zeros(m)
            ea[a] = h[a]
            fp, fm = f(x + ea), f(x - ea)
            if not (math.isfinite(fp) and math.isfinite(fm)):
                ok = False
                break
            H[a, a] = (fp - 2.0 * f0 + fm) / h[a] ** 2
            for b in range(a + 1, m):
                eb = np.zeros(m)
                eb[b] = h[b]
                vals = [f(x + ea + eb), f(x + ea - eb), f(x - ea + eb), f(x - ea - eb)]
                if not all(math.isfinite(v) for v in vals):
                    ok = False
                    break
                H[a, b] = H[b, a] = (vals[0] - vals[1] - vals[2] + vals[3]) / (4 * h[a] * h[b])
        if ok:
            return H
    raise NumericalError("Hessian evaluation hits infeasible points even after step shrinkage")


def standard_errors(result: FitResult, panel: ExcessPanel, covs: CovariatePanel) -> StdErrorReport:
    """Asymptotic standard errors per regime from the numerical observed information.

    The unpenalized NLL of each regime's assigned excesses is differentiated
    twice by central differences. A regime whose Hessian is singular or
    indefinite (including one with fewer observations than needed to pin down
    its coefficients) is flagged instead of reporting errors.
    """
    d = build_design(panel, covs)
    labels = result.paths.flat()
    theta = result.theta
    out = []
    for k in range(theta.K):
        idx = np.flatnonzero(labels == k)
        yk, Xk = np.ascontiguousarray(d.y[idx]), np.ascontiguousarray(d.X[idx])
        x = theta.regime_vector(k)
        if len(idx) == 0:
            out.append(RegimeErrors(k, 0, None, True))
            continue
        H = _hessian(lambda c: _kernels.loss_sum(yk, Xk, c), x)
        H = 0.5 * (H + H.T)
        eig = np.linalg.eigvalsh(H)
        rank_short = 2 * len(idx) < len(x) or np.linalg.matrix_rank(Xk) < Xk.shape[1]
        if rank_short or eig[0] <= _EIG_RTOL * max(eig[-1], 0.0) or eig[-1] <= 0:
            out.append(RegimeErrors(k, len(idx), None, True, H))
            continue
        cov = np.linalg.inv(H)
        out.append(RegimeErrors(k, len(idx), np.sqrt(np.diag(cov)), False, H))
    return StdErrorReport(coefficient_names(covs.names), out)


@dataclass
class EsMatrix:
    values: np.ndarray
    locations: list[str]
    mode: str


def _half_gaps(t):
    """Half the smallest gap to an existing neighbour; inf for a lone event."""
    t = np.asarray(t, dtype=float)
    g = np.full(len(t), np.inf)
    if len(t) > 1:
        gaps = np.diff(t)
        g[:-1] = gaps
        g[1:] = np.minimum(g[1:], gaps)
    return 0.5 * g


def sync_counts(ti, tj, tau_max=math.inf):
    """Return ``(c(i|j), c(j|i))``: events of i shortly after events of j and vice versa."""
    ti = np.asarray(ti, dtype=float)
    tj = np.asarray(tj, dtype=float)
    if len(ti) == 0 or len(tj) == 0:
        return 0.0, 0.0
    D = ti[:, None] - tj[None, :]
    tau = np.minimum(np.minimum(_half_gaps(ti)[:, None], _half_gaps(tj)[None, :]), tau_max)
    ties = 0.5 * np.count_nonzero(D == 0)
    c_ij = np.count_nonzero((D > 0) & (D <= tau)) + ties
    c_ji = np.count_nonzero((D < 0) & (-D <= tau)) + ties
    return float(c_ij), float(c_ji)


def event_sync(event_times: Sequence, tau_max: float = math.inf, locations=None,
               mode: str = STATIONARY) -> EsMatrix:
    """Symmetric event-synchronization matrix with unit diagonal.

    ``ES_ij = (c(i|j) + c(j|i)) / sqrt(m_i m_j)``, clamped to [0, 1]; the
    synchronization window of each pair of events is half the smallest
    neighbouring inter-event gap, capped at ``tau_max``. Locations without
    events get a zero row and column.
    """
    if not tau_max > 0:
        raise DataError("tau_max must be positive")
    times = [np.asarray(t) for t in event_times]
    for t in times:
        if np.any(np.diff(t) <= 0):
            raise DataError("event times must be strictly increasing")
    S = len(times)
    locations = list(locations) if locations is not None else [str(s) for s in range(S)]
    es = np.eye(S)
    empty = [locations[s] for s in range(S) if len(times[s]) == 0]
    if empty:
        warnings.warn(f"no events at {', '.join(empty)}; ES row/column set to 0", stacklevel=2)
    for i in range(S):
        for j in range(i + 1, S):
            mi, mj = len(times[i]), len(times[j])
            if mi == 0 or mj == 0:
                continue
            c_ij, c_ji = sync_counts(times[i], times[j], tau_max)
            es[i, j] = es[j, i] = min(1.0, max(0.0, (c_ij + c_ji) / math.sqrt(mi * mj)))
    return EsMatrix(es, locations, mode)


def cluster_events(times: Sequence, labels: Sequence, k: int) -> list[np.ndarray]:
    """Keep each location's events assigned to regime ``k``."""
    return [np.asarray(t)[np.asarray(r) == k] for t, r in zip(times, labels)]
