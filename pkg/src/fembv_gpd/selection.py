"""AICc scoring and grid search over (K, C, lambda)."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Sequence

from .data import CovariatePanel, ExcessPanel, ModelConfig
from .errors import DataError, FembvError
from .optimizer import AnnealerSettings, FitResult, fit

logger = logging.getLogger(__name__)


def aicc(nll: float, p: int, n: int) -> float:
    """Small-sample corrected AIC: ``2 nll + 2p + 2p(p+1)/(n-p-1)``."""
    if n <= p + 1:
        raise DataError(f"sample too small for AICc: n={n}, p={p}")
    return 2.0 * nll + 2.0 * p + 2.0 * p * (p + 1) / (n - p - 1)


def count_parameters(result: FitResult) -> int:
    """Regression coefficients of all regimes plus the total number of switches."""
    theta = result.theta
    return theta.K * 2 * (theta.P + 1) + result.paths.total_switches()


@dataclass
class SelectionRecord:
    config: ModelConfig
    nll: float
    penalized_nll: float
    n: int
    p: int
    aicc: float
    converged: bool
    error: str | None = None
    result: FitResult | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class SelectionTable:
    records: list[SelectionRecord]
    best_index: int | None

    @property
    def best(self) -> SelectionRecord | None:
        return None if self.best_index is None else self.records[self.best_index]


def select_best(records: Sequence[SelectionRecord]) -> int | None:
    """Index of minimal AICc; ties to smaller K, then smaller C, then larger lambda."""
    finite = [i for i, r in enumerate(records) if r.ok and math.isfinite(r.aicc)]
    if not finite:
        return None
    return min(finite, key=lambda i: (records[i].aicc, records[i].config.K,
                                      records[i].config.C, -records[i].config.lam, i))


def record_for(result: FitResult, n: int) -> SelectionRecord:
    p = count_parameters(result)
    score = aicc(result.nll, p, n) if n > p + 1 else math.inf
    return SelectionRecord(result.config, result.nll, result.penalized_nll, n, p, score,
                           result.converged, None, result)


def grid_search(panel: ExcessPanel, covs: CovariatePanel, Ks: Sequence[int], Cs: Sequence[int],
                lams: Sequence[float], base: ModelConfig | None = None,
                settings: AnnealerSettings | None = None, workers: int = 1) -> SelectionTable:
    """Fit every (K, C, lambda) combination in grid order and score it by AICc.

    A failing cell is recorded with its error and ``aicc = inf``; it does not
    stop the other cells.
    """
    grid = list(itertools.product(Ks, Cs, lams))
    if not grid:
        raise DataError("empty selection grid")
    base = base or ModelConfig(K=1, C=0)
    n = panel.n_total
    records = []
    for K, C, lam in grid:
        cfg = base.with_(K=int(K), C=int(C), lam=float(lam))
        try:
            rec = record_for(fit(panel, covs, cfg, settings, workers), n)
        except FembvError as exc:
            logger.warning("cell K=%s C=%s lambda=%s failed: %s", K, C, lam, exc)
            rec = SelectionRecord(cfg, math.nan, math.nan, n, 0, math.inf, False, str(exc))
        records.append(rec)
    return SelectionTable(records, select_best(records))
