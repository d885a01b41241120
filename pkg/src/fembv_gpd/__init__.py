"""Switching GPD regressions for spatio-temporal threshold excesses.

K regime-specific Generalized Pareto regressions share covariates; each
location switches between regimes at most C times. Fitting alternates an
exact dynamic-programming assignment step with an annealed coefficient
search, over many seeded restarts.
"""

__version__ = "0.1.0"

from .data import (GLOBAL, LOCAL, CovariatePanel, CovariateTable, ExcessPanel, ModelConfig, RawSeries,
                   align_panels, apply_scaling, build_excess_panel, empirical_quantile, extract_excesses,
                   scale_covariates)
from .diagnostics import (EsMatrix, QqTable, StdErrorReport, cluster_events, event_sync, fitted_residuals,
                          ks_exponential, qq_data, residual_transform, standard_errors, sync_counts)
from .errors import DataError, FembvError, InfeasiblePointError, NumericalError
from .gpd import GpdPoint, gpd_cdf, gpd_logpdf, gpd_quantile
from .objective import (SwitchingPath, build_loss_matrix, bv_norm, indicator, penalized_nll, switch_count,
                        weighted_nll)
from .optimizer import AnnealerSettings, FitResult, alternating_optimization, fit, gamma_step, theta_step
from .regression import RegimeParameters, eval_params, feasibility_check
from .selection import SelectionRecord, SelectionTable, aicc, count_parameters, grid_search
from .synth import CovariateSpec, SynthScenario, default_scenario, gen_panel

__all__ = [name for name in dir() if not name.startswith("_")]
