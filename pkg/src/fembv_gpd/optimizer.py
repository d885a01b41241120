"""Restarted alternating optimization of regimes and switching paths.

Each restart draws random switching paths within the budget, fits the regime
coefficients to them, then alternates

1. an exact per-location assignment step (dynamic program over
   ``(time, label, switches used)``), and
2. a gradient-free annealed random-walk search over the coefficients,

until the penalized objective stops decreasing. The best restart wins.
"""

from __future__ import annotations

import hashlib
import logging
import math
import multiprocessing as mp
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .data import CovariatePanel, ExcessPanel, ModelConfig
from .errors import DataError, InfeasiblePointError, NumericalError
from .objective import SwitchingPath, design_loss_matrix, design_penalized, design_nll
from .regression import Design, RegimeParameters, build_design

logger = logging.getLogger(__name__)

# Bounded attempts when drawing an initial coefficient set from the feasible box.
_INIT_ATTEMPTS = 100


@dataclass(frozen=True)
class AnnealerSettings:
    """Tuning of the coefficient search.

    Step scales start at ``initial_step_scale`` times a reference magnitude
    (1 for shape coefficients, the mean excess for scale coefficients) and
    adapt per coefficient toward ``target_acceptance``; they never drop below
    ``step_floor`` times the same reference. With ``carry_state`` the
    temperature and step scales continue across the iterations of one
    restart instead of starting over. ``zero_move_prob`` is the share of
    proposals that set a penalized coefficient exactly to zero (only used
    when the L1 weight is positive). A chain stops once ``patience``
    consecutive steps bring no new best point (0 disables early stopping).
    """

    n_steps: int = 2000
    initial_step_scale: float = 0.05
    temperature_init: float = 1.0
    temperature_decay: float = 0.999
    target_acceptance: float = 0.3
    adapt_rate: float = 0.05
    step_floor: float = 1e-8
    zero_move_prob: float = 0.1
    patience: int = 150
    carry_state: bool = True

    def __post_init__(self):
        if self.n_steps < 1:
            raise DataError("n_steps must be positive")
        if not (self.initial_step_scale > 0 and self.temperature_init > 0 and self.step_floor > 0):
            raise DataError("step scale, temperature and step floor must be positive")
        if not 0 < self.temperature_decay < 1:
            raise DataError("temperature_decay must lie in (0, 1)")
        if not 0 < self.target_acceptance < 1:
            raise DataError("target_acceptance must lie in (0, 1)")
        if not 0 <= self.zero_move_prob < 1:
            raise DataError("zero_move_prob must lie in [0, 1)")
        if self.patience < 0:
            raise DataError("patience must be >= 0")


@dataclass
class AnnealState:
    temperature: np.ndarray
    scales: np.ndarray
    floors: np.ndarray

    @classmethod
    def fresh(cls, K: int, q: int, y_scale: float, settings: AnnealerSettings) -> "AnnealState":
        ref = np.concatenate([np.ones(q), np.full(q, y_scale)])
        return cls(
            np.full(K, settings.temperature_init),
            np.tile(settings.initial_step_scale * ref, (K, 1)),
            settings.step_floor * ref,
        )


@dataclass
class FitResult:
    theta: RegimeParameters
    paths: SwitchingPath
    nll: float
    penalized_nll: float
    config: ModelConfig
    seed: int
    ao_iterations: int
    restart_index_of_best: int
    converged: bool
    trace: list = field(default_factory=list)
    restart_values: list = field(default_factory=list)


@dataclass
class RestartResult:
    theta: RegimeParameters
    labels: np.ndarray
    value: float
    nll: float
    iterations: int
    converged: bool
    trace: list


def gamma_step(loss, C: int, location=None, times=None):
    """Best label path with at most ``C`` switches for one location.

    Returns ``(path, cost)``. Among equal-cost paths the lexicographically
    smallest label sequence is returned (lowest label first).
    """
    L = np.ascontiguousarray(loss, dtype=float)
    if L.ndim != 2 or L.shape[0] < 1 or L.shape[1] < 1:
        raise DataError("loss matrix must be T x K with T, K >= 1")
    if np.isnan(L).any():
        raise DataError("loss matrix contains NaN")
    dead = np.flatnonzero(np.all(np.isposinf(L), axis=1))
    if len(dead):
        j = int(dead[0])
        raise InfeasiblePointError(location if location is not None else 0,
                                   int(times[j]) if times is not None else j)
    if C < 0:
        raise DataError("switch budget must be >= 0")
    path, cost = _kernels.budget_dp(L, int(min(C, L.shape[0])))
    if not math.isfinite(cost):
        where = f" at location {location}" if location is not None else ""
        raise NumericalError(f"no label path within {C} switches avoids infeasible cells{where}")
    return path, float(cost)


def random_feasible_path(T: int, K: int, C: int, rng, n_switches: int | None = None) -> np.ndarray:
    """Random labels with at most ``C`` switches (exactly ``n_switches`` if given).

    The switch count is uniform on ``0..min(C, T-1)``, switch positions are
    uniform without replacement, and each new segment takes a label different
    from the previous one.
    """
    if K < 1 or C < 0 or T < 0:
        raise DataError("need K >= 1, C >= 0, T >= 0")
    if T == 0:
        return np.zeros(0, np.int64)
    if K == 1:
        if n_switches:
            raise DataError("a single regime cannot switch")
        return np.zeros(T, np.int64)
    if n_switches is None:
        c = int(rng.integers(0, min(C, T - 1) + 1))
    else:
        c = int(n_switches)
        if c > T - 1:
            raise DataError(f"cannot place {c} switches in a series of length {T}")
    cuts = np.sort(rng.choice(T - 1, size=c, replace=False)) + 1 if c else np.zeros(0, np.int64)
    labels = np.empty(c + 1, np.int64)
    labels[0] = rng.integers(0, K)
    for i in range(1, c + 1):
        nxt = int(rng.integers(0, K - 1))
        labels[i] = nxt + (nxt >= labels[i - 1])
    return np.repeat(labels, np.diff(np.concatenate([[0], cuts, [T]])))


def _penalty_weights(q: int, penalize_offsets: bool) -> np.ndarray:
    w = np.ones(2 * q)
    if not penalize_offsets:
        w[0] = w[q] = 0.0
    return w


def _regime_value(y, X, coef, lam, weights) -> float:
    buf = np.empty(len(y))
    _kernels.point_losses(y, X, coef, buf)
    if np.isinf(buf).any():
        return math.inf
    return math.fsum(buf) + (lam * float(np.dot(weights, np.abs(coef))) if lam else 0.0)


def _feasible_start(y, X, coef) -> np.ndarray:
    """Warm start, else exponential regime with the same scale, else mean-scale."""
    q = X.shape[1]
    if _kernels.loss_sum(y, X, coef) < math.inf:
        return coef
    alt = coef.copy()
    alt[:q] = 0.0
    if _kernels.loss_sum(y, X, alt) < math.inf:
        return alt
    alt[q:] = 0.0
    alt[q] = float(np.mean(y))
    if _kernels.loss_sum(y, X, alt) < math.inf:
        return alt
    raise NumericalError("no feasible starting point for the coefficient search")


def _chain_seed(base: int, idx: np.ndarray, start: np.ndarray) -> int:
    # keyed by the regime's data and start point, not its label, so relabeling
    # regimes relabels the result
    h = hashlib.blake2b(digest_size=8)
    h.update(base.to_bytes(8, "little"))
    h.update(np.ascontiguousarray(idx, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(start, dtype=np.float64).tobytes())
    return int.from_bytes(h.digest(), "little")


def _theta_step(d: Design, labels, lam, warm: RegimeParameters, settings: AnnealerSettings,
                rng, state: AnnealState, penalize_offsets=True) -> RegimeParameters:
    K, q = warm.K, warm.P + 1
    weights = _penalty_weights(q, penalize_offsets)
    base = int(rng.integers(0, 2**63 - 1))
    n = settings.n_steps
    out = warm.copy()
    for k in range(K):
        idx = np.flatnonzero(labels == k)
        if len(idx) == 0:
            continue
        yk = np.ascontiguousarray(d.y[idx])
        Xk = np.ascontiguousarray(d.X[idx])
        warm_vec = warm.regime_vector(k)
        start = _feasible_start(yk, Xk, warm_vec)
        crng = np.random.default_rng(_chain_seed(base, idx, start))
        comps = crng.integers(0, 2 * q, size=n)
        normals = crng.standard_normal(n)
        uniforms = crng.random(n)
        zmoves = crng.random(n) < settings.zero_move_prob
        if lam > 0:
            zmoves &= weights[comps] > 0
        else:
            zmoves[:] = False
        scales = state.scales[k].copy()
        best, _, temp, _ = _kernels.anneal(
            yk, Xk, start.copy(), weights, float(lam), comps, normals, uniforms, zmoves,
            scales, state.floors, float(state.temperature[k]), settings.temperature_decay,
            settings.target_acceptance, settings.adapt_rate, settings.patience,
        )
        if settings.carry_state:
            state.scales[k] = scales
            state.temperature[k] = temp
        if _regime_value(yk, Xk, best, lam, weights) <= _regime_value(yk, Xk, warm_vec, lam, weights):
            out = out.with_regime(k, best)
        elif not np.array_equal(start, warm_vec):
            out = out.with_regime(k, start)
    return out


def theta_step(panel: ExcessPanel, covs: CovariatePanel, paths: SwitchingPath, lam: float,
               warm_start: RegimeParameters, settings: AnnealerSettings | None = None,
               rng=None, state: AnnealState | None = None,
               penalize_offsets: bool = True) -> RegimeParameters:
    """Minimize the penalized NLL over the coefficients at fixed paths.

    The objective separates over regimes, so each regime is searched on its
    own assigned excesses. Regimes without assigned points keep their
    warm-start coefficients. The result is never worse than ``warm_start``.
    """
    settings = settings or AnnealerSettings()
    rng = rng if rng is not None else np.random.default_rng(0)
    d = build_design(panel, covs)
    paths.validate(warm_start.K, lengths=panel.lengths)
    if state is None:
        state = AnnealState.fresh(warm_start.K, warm_start.P + 1, _y_scale(d), settings)
    return _theta_step(d, paths.flat(), lam, warm_start, settings, rng, state, penalize_offsets)


def _y_scale(d: Design) -> float:
    return float(np.mean(d.y)) if d.n else 1.0


def _gamma_all(d: Design, theta: RegimeParameters, C: int) -> np.ndarray:
    L = design_loss_matrix(d, theta)
    out = np.empty(d.n, np.int64)
    for s in range(len(d.locations)):
        sl = d.location_slice(s)
        if sl.stop == sl.start:
            continue
        out[sl], _ = gamma_step(L[sl], C, d.locations[s], d.times[sl])
    return out


def _initial_theta(d: Design, labels, K: int, rng) -> RegimeParameters:
    """Offsets drawn from xi in (-0.4, 0.4), sigma in (0.5 median, 2 mean); zero slopes."""
    q = d.X.shape[1]
    lo, hi = 0.5 * float(np.median(d.y)), 2.0 * float(np.mean(d.y))
    xi = np.zeros((K, q))
    sigma = np.zeros((K, q))
    for k in range(K):
        idx = np.flatnonzero(labels == k)
        yk, Xk = d.y[idx], d.X[idx]
        for _ in range(_INIT_ATTEMPTS):
            xi[k, 0] = rng.uniform(-0.4, 0.4)
            sigma[k, 0] = rng.uniform(lo, hi)
            if _kernels.loss_sum(yk, Xk, np.concatenate([xi[k], sigma[k]])) < math.inf:
                break
        else:
            xi[k, 0] = 0.0
    return RegimeParameters(xi, sigma)


def alternating_optimization(d: Design, labels, theta: RegimeParameters, config: ModelConfig,
                             settings: AnnealerSettings, rng) -> RestartResult:
    """One restart of the alternating scheme from the given paths and coefficients.

    ``trace`` holds the penalized objective after the initial coefficient fit
    and then after every assignment and every coefficient step.
    """
    lam, C = config.lam, config.C
    labels = np.asarray(labels, np.int64).copy()
    state = AnnealState.fresh(theta.K, theta.P + 1, _y_scale(d), settings)

    def value(th, lab):
        return design_penalized(d, th, lab, lam, config.penalize_offsets)

    theta = _theta_step(d, labels, lam, theta, settings, rng, state, config.penalize_offsets)
    f = value(theta, labels)
    if not math.isfinite(f):
        raise NumericalError("initial coefficients are infeasible under the initial paths")
    trace = [f]
    converged = False
    it = 0
    while it < config.max_ao_iterations:
        it += 1
        new_labels = _gamma_all(d, theta, C)
        f_gamma = value(theta, new_labels)
        if f_gamma <= f:
            labels = new_labels
        else:  # roundoff between DP and exact summation
            f_gamma = f
        new_theta = _theta_step(d, labels, lam, theta, settings, rng, state, config.penalize_offsets)
        f_theta = value(new_theta, labels)
        if f_theta <= f_gamma:
            theta = new_theta
        else:
            f_theta = f_gamma
        trace += [f_gamma, f_theta]
        delta = f - f_theta
        f = f_theta
        if abs(delta) < config.ao_tolerance:
            converged = True
            break
    return RestartResult(theta, labels, f, design_nll(d, theta, labels), it, converged, trace)


def _run_restart(d: Design, config: ModelConfig, settings: AnnealerSettings, r: int) -> RestartResult:
    rng = np.random.default_rng([config.seed, r])
    parts = [random_feasible_path(int(d.offsets[s + 1] - d.offsets[s]), config.K, config.C, rng)
             for s in range(len(d.locations))]
    labels = np.concatenate(parts) if parts else np.zeros(0, np.int64)
    theta0 = _initial_theta(d, labels, config.K, rng)
    return alternating_optimization(d, labels, theta0, config, settings, rng)


_WORKER = {}


def _worker_init(d, config, settings):
    _WORKER.update(d=d, config=config, settings=settings)


def _worker_run(r):
    return _run_restart(_WORKER["d"], _WORKER["config"], _WORKER["settings"], r)


def clamp_budget(config: ModelConfig, panel: ExcessPanel) -> ModelConfig:
    """Limit ``C`` to its natural boundary, the longest series length."""
    cmax = max(panel.lengths)
    if config.C > cmax:
        warnings.warn(f"switch budget C={config.C} exceeds the longest series ({cmax}); clamped",
                      stacklevel=3)
        return config.with_(C=cmax)
    return config


def fit(panel: ExcessPanel, covs: CovariatePanel, config: ModelConfig,
        settings: AnnealerSettings | None = None, workers: int = 1) -> FitResult:
    """Fit K regimes and switching paths; best of ``config.restarts`` restarts.

    Restart ``r`` uses the random stream seeded by ``(config.seed, r)``, so the
    result does not depend on ``workers``. Ties go to the lowest restart index.
    """
    settings = settings or AnnealerSettings()
    d = build_design(panel, covs)
    if d.n == 0:
        raise DataError("panel contains no excesses")
    config = clamp_budget(config, panel)
    if workers > 1 and config.restarts > 1:
        _kernels.warmup()
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(min(workers, config.restarts), mp_context=ctx,
                                 initializer=_worker_init, initargs=(d, config, settings)) as ex:
            results = list(ex.map(_worker_run, range(config.restarts)))
    else:
        results = [_run_restart(d, config, settings, r) for r in range(config.restarts)]
    values = [r.value for r in results]
    best = min(range(len(results)), key=lambda i: (values[i], i))
    b = results[best]
    logger.info("best restart %d of %d: penalized NLL %.6f", best, len(results), b.value)
    return FitResult(
        theta=b.theta,
        paths=SwitchingPath.from_flat(b.labels, d.offsets),
        nll=b.nll,
        penalized_nll=b.value,
        config=config,
        seed=config.seed,
        ao_iterations=b.iterations,
        restart_index_of_best=best,
        converged=b.converged,
        trace=b.trace,
        restart_values=values,
    )
