"""Panel types, threshold-excess extraction and covariate scaling."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DataError

LOCAL = "local"
GLOBAL = "global"

DEFAULT_QUANTILE = 0.98
DEFAULT_EPSILON = 1e-5


@dataclass
class RawSeries:
    """Daily observations at one location (integer day index, value)."""

    location_id: str
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise DataError(f"{self.location_id}: times and values must be 1-d and equal length")
        if np.any(np.diff(self.times) <= 0):
            raise DataError(f"{self.location_id}: time indices must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"{self.location_id}: values must be finite")


@dataclass
class ExcessPanel:
    """Threshold excesses per location; series lengths may differ."""

    locations: list[str]
    times: list[np.ndarray]
    excesses: list[np.ndarray]
    thresholds: list[float] = field(default_factory=list)
    quantile_level: float | None = None

    def __post_init__(self):
        if len(self.locations) < 1:
            raise DataError("panel needs at least one location")
        if len(set(self.locations)) != len(self.locations):
            raise DataError("duplicate location ids")
        if not (len(self.times) == len(self.excesses) == len(self.locations)):
            raise DataError("locations, times and excesses must have equal length")
        if not self.thresholds:
            self.thresholds = [float("nan")] * len(self.locations)
        self.times = [np.asarray(t, dtype=np.int64) for t in self.times]
        self.excesses = [np.asarray(y, dtype=float) for y in self.excesses]
        for loc, t, y in zip(self.locations, self.times, self.excesses):
            if t.shape != y.shape or t.ndim != 1:
                raise DataError(f"{loc}: times and excesses must be 1-d and equal length")
            if np.any(np.diff(t) <= 0):
                raise DataError(f"{loc}: time indices must be strictly increasing")
            if np.any(~(y > 0)) or not np.all(np.isfinite(y)):
                raise DataError(f"{loc}: excesses must be finite and strictly positive")

    @property
    def n_locations(self) -> int:
        return len(self.locations)

    @property
    def lengths(self) -> list[int]:
        return [len(y) for y in self.excesses]

    @property
    def n_total(self) -> int:
        return int(sum(self.lengths))


@dataclass
class CovariateTable:
    """Raw covariate records: per location, times and a (n, P) value matrix."""

    names: list[str]
    data: dict[str, tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        P = len(self.names)
        clean = {}
        for loc, (t, v) in self.data.items():
            t = np.asarray(t, dtype=np.int64)
            v = np.asarray(v, dtype=float).reshape(len(t), P)
            if np.any(np.diff(t) <= 0):
                raise DataError(f"{loc}: covariate time indices must be strictly increasing")
            clean[loc] = (t, v)
        self.data = clean


@dataclass
class CovariatePanel:
    """Covariate vectors aligned 1:1 with an :class:`ExcessPanel`.

    ``scaling[s][p]`` holds the ``(min, max)`` used to scale covariate ``p``
    at location ``s``; ``None`` for raw values.
    """

    names: list[str]
    kinds: list[str]
    values: list[np.ndarray]
    scaling: list[list[tuple[float, float]]] | None = None

    def __post_init__(self):
        if len(self.kinds) != len(self.names):
            raise DataError("one kind flag per covariate is required")
        for k in self.kinds:
            if k not in (LOCAL, GLOBAL):
                raise DataError(f"covariate kind must be 'local' or 'global', got {k!r}")
        self.values = [_as_rows(v, len(self.names)) for v in self.values]

    @property
    def n_covariates(self) -> int:
        return len(self.names)

    @classmethod
    def empty_like(cls, panel: ExcessPanel) -> "CovariatePanel":
        """Offset-only model: zero covariates."""
        return cls([], [], [np.zeros((n, 0)) for n in panel.lengths],
                   scaling=[[] for _ in panel.lengths])


@dataclass
class ModelConfig:
    """Settings for one fit of the switching GPD model."""

    K: int
    C: int
    lam: float = 0.0
    restarts: int = 50
    max_ao_iterations: int = 1000
    ao_tolerance: float = 1e-3
    seed: int = 0
    penalize_offsets: bool = True

    def __post_init__(self):
        if int(self.K) < 1:
            raise DataError("K must be >= 1")
        if int(self.C) < 0:
            raise DataError("C must be >= 0")
        if not float(self.lam) >= 0:
            raise DataError("lambda must be >= 0")
        if int(self.restarts) < 1 or int(self.max_ao_iterations) < 1:
            raise DataError("restarts and max_ao_iterations must be positive")
        if not float(self.ao_tolerance) > 0:
            raise DataError("ao_tolerance must be positive")
        if int(self.seed) < 0:
            raise DataError("seed must be nonnegative")
        self.K, self.C, self.restarts = int(self.K), int(self.C), int(self.restarts)
        self.max_ao_iterations, self.seed = int(self.max_ao_iterations), int(self.seed)
        self.lam, self.ao_tolerance = float(self.lam), float(self.ao_tolerance)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def _as_rows(v, P):
    v = np.asarray(v, dtype=float)
    if v.ndim == 1 and P == 1:
        v = v.reshape(-1, 1)
    elif v.ndim == 1 and v.size == 0:
        v = v.reshape(0, P)
    if v.ndim != 2 or v.shape[1] != P:
        raise DataError(f"covariate rows must have {P} columns, got shape {v.shape}")
    return v


def empirical_quantile(values, level: float) -> float:
    """Linear interpolation between order statistics at ``1 + (n-1)p``."""
    return float(np.quantile(np.asarray(values, dtype=float), level, method="linear"))


def extract_excesses(series: RawSeries, quantile_level: float = DEFAULT_QUANTILE,
                     epsilon: float = DEFAULT_EPSILON):
    """Threshold = empirical quantile + epsilon; keep values strictly above it.

    Returns ``(threshold, times, excesses)``. A series without exceedances
    yields empty arrays and a warning.
    """
    if len(series.values) == 0:
        raise DataError(f"{series.location_id}: empty series")
    if not 0.0 < quantile_level < 1.0:
        raise DataError(f"quantile level must lie in (0, 1), got {quantile_level}")
    threshold = empirical_quantile(series.values, quantile_level) + epsilon
    keep = series.values > threshold
    if not keep.any():
        warnings.warn(f"{series.location_id}: no exceedances above {threshold!r}", stacklevel=2)
    return threshold, series.times[keep].copy(), series.values[keep] - threshold


def build_excess_panel(series: Sequence[RawSeries], quantile_level: float = DEFAULT_QUANTILE,
                       epsilon: float = DEFAULT_EPSILON) -> ExcessPanel:
    locs, times, ys, thr = [], [], [], []
    for s in series:
        u, t, y = extract_excesses(s, quantile_level, epsilon)
        locs.append(s.location_id)
        times.append(t)
        ys.append(y)
        thr.append(u)
    return ExcessPanel(locs, times, ys, thr, quantile_level)


def align_panels(excesses: ExcessPanel, covariates: CovariateTable,
                 kinds: Sequence[str] | None = None) -> CovariatePanel:
    """Pick the covariate rows observed at each excess time (unscaled)."""
    P = len(covariates.names)
    kinds = list(kinds) if kinds is not None else [LOCAL] * P
    missing = []
    rows = []
    for loc, t in zip(excesses.locations, excesses.times):
        if P == 0 and loc not in covariates.data:
            rows.append(np.zeros((len(t), 0)))
            continue
        if loc not in covariates.data:
            missing.extend((loc, int(ti)) for ti in t)
            rows.append(np.zeros((len(t), P)))
            continue
        ct, cv = covariates.data[loc]
        pos = np.searchsorted(ct, t)
        pos_c = np.minimum(pos, max(len(ct) - 1, 0))
        ok = (pos < len(ct)) & (ct[pos_c] == t) if len(ct) else np.zeros(len(t), bool)
        missing.extend((loc, int(ti)) for ti in t[~ok])
        rows.append(cv[pos_c] if len(ct) else np.zeros((len(t), P)))
    if missing:
        shown = ", ".join(f"({l}, {t})" for l, t in missing[:20])
        more = f" and {len(missing) - 20} more" if len(missing) > 20 else ""
        raise DataError(f"missing covariate records at {shown}{more}")
    return CovariatePanel(list(covariates.names), kinds, rows)


def _affine_scale(x, lo, hi, kind):
    unit = (x - lo) / (hi - lo)
    return unit if kind == LOCAL else 2.0 * unit - 1.0


def scale_covariates(panel: CovariatePanel) -> CovariatePanel:
    """Map local covariates to [0, 1] (pooled per location) and global ones
    to [-1, 1] (pooled over all locations).

    The returned panel carries ``scaling[s][p] = (min, max)`` so the same map
    can be reapplied with :func:`apply_scaling`.
    """
    S, P = len(panel.values), panel.n_covariates
    constants = [[(float("nan"), float("nan"))] * P for _ in range(S)]
    for p, (name, kind) in enumerate(zip(panel.names, panel.kinds)):
        if kind == GLOBAL:
            pooled = np.concatenate([v[:, p] for v in panel.values])
            lo_hi = _range(pooled, name)
            for s in range(S):
                constants[s][p] = lo_hi
        else:
            for s, v in enumerate(panel.values):
                if len(v):
                    constants[s][p] = _range(v[:, p], name)
    return apply_scaling(panel, constants)


def apply_scaling(panel: CovariatePanel, constants) -> CovariatePanel:
    """Apply stored per-location ``(min, max)`` constants to raw covariates."""
    if len(constants) != len(panel.values):
        raise DataError("scaling constants do not match the number of locations")
    out = []
    for v, row in zip(panel.values, constants):
        w = v.copy()
        for p, kind in enumerate(panel.kinds):
            lo, hi = row[p]
            if len(w):
                w[:, p] = _affine_scale(v[:, p], lo, hi, kind)
        out.append(w)
    return CovariatePanel(list(panel.names), list(panel.kinds), out,
                          [[tuple(map(float, c)) for c in row] for row in constants])


def _range(x, name):
    if len(x) == 0:
        raise DataError(f"covariate {name!r} has no observations")
    lo, hi = float(np.min(x)), float(np.max(x))
    if not hi > lo:
        raise DataError(f"constant covariate {name!r}: zero range, cannot scale")
    return (lo, hi)
