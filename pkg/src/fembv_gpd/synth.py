"""Synthetic panels with known regimes, switching paths and covariates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import GLOBAL, LOCAL, CovariatePanel, ExcessPanel, scale_covariates
from .errors import DataError
from .gpd import XI_BOUND, gpd_quantile
from .objective import SwitchingPath
from .optimizer import random_feasible_path
from .regression import RegimeParameters

UNIFORM = "uniform"
SINUSOID = "sinusoid"

# Days per cycle of sinusoidal covariates.
_PERIOD = 365.0
# Redraw limit for a zero excess (u == 0) at one point.
_MAX_REDRAWS = 10**6


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: str = LOCAL
    generator: str = SINUSOID

    def __post_init__(self):
        if self.kind not in (LOCAL, GLOBAL):
            raise DataError(f"unknown covariate kind {self.kind!r}")
        if self.generator not in (UNIFORM, SINUSOID):
            raise DataError(f"unknown covariate generator {self.generator!r}")


@dataclass
class SynthScenario:
    n_locations: int
    length: int | list[int]
    theta: RegimeParameters
    switches: int | list[int]
    covariates: list[CovariateSpec] = field(default_factory=list)
    seed: int = 0

    @property
    def K(self) -> int:
        return self.theta.K

    def lengths(self) -> list[int]:
        if isinstance(self.length, int):
            return [self.length] * self.n_locations
        return list(self.length)

    def switch_counts(self) -> list[int]:
        if isinstance(self.switches, int):
            return [self.switches] * self.n_locations
        return list(self.switches)


def default_scenario(seed: int = 0, noise_covariate: bool = False) -> SynthScenario:
    """Two well separated regimes driven by one sinusoidal local covariate.

    Regime 0: xi = 0.1, sigma = 1 + 0.5 u; regime 1: xi = -0.1, sigma = 8 + u.
    Five locations of 400 excesses with 6 switches each. With
    ``noise_covariate`` a second local covariate with zero true effect is added.
    """
    covs = [CovariateSpec("u", LOCAL, SINUSOID)]
    xi = [[0.1, 0.0], [-0.1, 0.0]]
    sigma = [[1.0, 0.5], [8.0, 1.0]]
    if noise_covariate:
        covs.append(CovariateSpec("noise", LOCAL, UNIFORM))
        xi = [row + [0.0] for row in xi]
        sigma = [row + [0.0] for row in sigma]
    return SynthScenario(5, 400, RegimeParameters(xi, sigma), 6, covs, seed)


def _raw_covariate(spec: CovariateSpec, times, rng):
    if spec.generator == UNIFORM:
        return rng.random(len(times))
    phase = rng.uniform(0.0, 2.0 * np.pi)
    return np.sin(2.0 * np.pi * times / _PERIOD + phase)


def gen_panel(scenario: SynthScenario):
    """Draw ``(ExcessPanel, CovariatePanel, true SwitchingPath)``.

    Location ``s`` uses its own stream spawned from the scenario seed; global
    covariates come from a separate shared stream. Times are ``1..T_s``.
    """
    S = scenario.n_locations
    lengths = scenario.lengths()
    switches = scenario.switch_counts()
    theta = scenario.theta
    P = len(scenario.covariates)
    if len(lengths) != S or len(switches) != S:
        raise DataError("per-location lengths and switch counts must have one entry per location")
    if theta.P != P:
        raise DataError(f"theta has {theta.P} slopes but scenario has {P} covariates")
    if S < 1 or min(lengths) < 1:
        raise DataError("need at least one location and one excess per location")

    root, *children = np.random.SeedSequence(scenario.seed).spawn(S + 1)
    grng = np.random.default_rng(root)
    Tmax = max(lengths)
    gtimes = np.arange(1, Tmax + 1)
    global_raw = {c.name: _raw_covariate(c, gtimes, grng) for c in scenario.covariates if c.kind == GLOBAL}

    names = [c.name for c in scenario.covariates]
    kinds = [c.kind for c in scenario.covariates]
    rngs = [np.random.default_rng(c) for c in children]
    times, raw, paths = [], [], []
    for s in range(S):
        T, rng = lengths[s], rngs[s]
        t = np.arange(1, T + 1)
        paths.append(random_feasible_path(T, theta.K, switches[s], rng, n_switches=switches[s]))
        cols = [global_raw[c.name][:T] if c.kind == GLOBAL else _raw_covariate(c, t, rng)
                for c in scenario.covariates]
        raw.append(np.column_stack(cols) if cols else np.zeros((T, 0)))
        times.append(t)
    covs = scale_covariates(CovariatePanel(names, kinds, raw)) if P else CovariatePanel(
        [], [], raw, [[] for _ in range(S)])

    excesses = []
    for s in range(S):
        rng, r, U = rngs[s], paths[s], covs.values[s]
        xi = theta.xi[r, 0] + np.einsum("ij,ij->i", U, theta.xi[r, 1:])
        sigma = theta.sigma[r, 0] + np.einsum("ij,ij->i", U, theta.sigma[r, 1:])
        bad = ~((sigma > 0) & (np.abs(xi) < XI_BOUND))
        if bad.any():
            j = int(np.flatnonzero(bad)[0])
            raise DataError(f"true parameters infeasible at location {s}, time {times[s][j]}")
        u = rng.random(len(r))
        y = gpd_quantile(u, xi, sigma)
        for _ in range(_MAX_REDRAWS):
            redo = ~((y > 0) & np.isfinite(y))
            if not redo.any():
                break
            u[redo] = rng.random(int(redo.sum()))
            y[redo] = gpd_quantile(u[redo], xi[redo], sigma[redo])
        else:
            raise DataError("could not draw positive excesses")
        excesses.append(y)

    locations = [f"S{s:02d}" for s in range(S)]
    panel = ExcessPanel(locations, times, excesses, [0.0] * S, None)
    return panel, covs, SwitchingPath(paths)
