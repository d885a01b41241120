import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fembv_gpd import (AnnealerSettings, CovariatePanel, DataError, ExcessPanel, InfeasiblePointError,
                       ModelConfig, NumericalError, RegimeParameters, SwitchingPath, default_scenario,
                       fit, gamma_step, gen_panel, penalized_nll, switch_count, theta_step)
from fembv_gpd.optimizer import _gamma_all, alternating_optimization, random_feasible_path
from fembv_gpd.regression import build_design
from oracles import best_permutation_accuracy, brute_force_path, grid_mle

L_EXAMPLE = [[0, 1], [0, 1], [1, 0], [1, 0]]


def test_gamma_one_switch():
    path, cost = gamma_step(L_EXAMPLE, 1)
    assert path.tolist() == [0, 0, 1, 1] and cost == 0


def test_gamma_no_switch_tie_goes_to_lower_label():
    path, cost = gamma_step(L_EXAMPLE, 0)
    assert path.tolist() == [0, 0, 0, 0] and cost == 2


def test_gamma_unconstrained_is_rowwise_argmin():
    rng = np.random.default_rng(0)
    L = rng.random((12, 3))
    path, cost = gamma_step(L, 11)
    assert path.tolist() == np.argmin(L, axis=1).tolist()
    assert cost == pytest.approx(L.min(axis=1).sum())


def test_gamma_budget_above_length_is_fine():
    path, _ = gamma_step(L_EXAMPLE, 50)
    assert path.tolist() == [0, 0, 1, 1]


def test_gamma_dead_row_names_point():
    L = [[0.0, 1.0], [math.inf, math.inf]]
    with pytest.raises(InfeasiblePointError, match="location='S7', time=42"):
        gamma_step(L, 1, location="S7", times=np.array([41, 42]))


def test_gamma_rejects_nan():
    with pytest.raises(DataError):
        gamma_step([[0.0, math.nan]], 1)


def test_gamma_avoids_infinite_cells():
    L = [[0, math.inf], [math.inf, 0], [0, 5]]
    path, cost = gamma_step(L, 2)
    assert path.tolist() == [0, 1, 0] and cost == 0
    path, cost = gamma_step(L, 1)
    assert path.tolist() == [0, 1, 1] and cost == 5


loss_cells = st.one_of(st.floats(0, 10), st.just(math.inf), st.sampled_from([0.0, 1.0, 2.0]))


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 3), st.integers(1, 6), st.integers(0, 4), st.data())
def test_gamma_matches_enumeration(K, T, C, data):
    L = np.array(data.draw(st.lists(st.lists(loss_cells, min_size=K, max_size=K), min_size=T, max_size=T)))
    for row in L:
        if np.all(np.isinf(row)):
            row[data.draw(st.integers(0, K - 1))] = 1.0
    ref_path, ref_cost = brute_force_path(L, C)
    if ref_path is None:
        with pytest.raises(NumericalError):
            gamma_step(L, C)
        return
    path, cost = gamma_step(L, C)
    assert cost == ref_cost
    assert tuple(path.tolist()) == ref_path
    assert switch_count(path) <= C


def test_random_path_special_cases():
    rng = np.random.default_rng(0)
    assert random_feasible_path(10, 1, 5, rng).tolist() == [0] * 10
    for _ in range(20):
        p = random_feasible_path(10, 3, 0, rng)
        assert len(set(p.tolist())) == 1


def test_random_path_budget_over_many_draws():
    rng = np.random.default_rng(1)
    counts = [switch_count(random_feasible_path(100, 2, 20, rng)) for _ in range(10_000)]
    assert max(counts) <= 20
    assert min(counts) == 0


@pytest.mark.parametrize("n", [0, 1, 6, 9])
def test_random_path_exact_switches(n):
    rng = np.random.default_rng(n)
    assert switch_count(random_feasible_path(10, 3, 9, rng, n_switches=n)) == n


def _stationary(y):
    panel = ExcessPanel(["A"], [np.arange(1, len(y) + 1)], [y])
    return panel, CovariatePanel.empty_like(panel)


def test_theta_step_matches_grid_oracle():
    y = np.random.default_rng(5).exponential(3.0, 2000)
    panel, covs = _stationary(y)
    warm = RegimeParameters.offsets([0.0], [1.0])
    paths = SwitchingPath([np.zeros(len(y), np.int64)])
    theta = theta_step(panel, covs, paths, 0.0, warm, rng=np.random.default_rng(1))
    xi_o, sigma_o, _ = grid_mle(y)
    assert abs(theta.xi[0, 0] - xi_o) < 0.03
    assert abs(theta.sigma[0, 0] - sigma_o) < 0.03
    assert abs(sigma_o - 3.0) < 0.2


def test_theta_step_never_worse_than_warm_start():
    y = np.random.default_rng(6).exponential(2.0, 300)
    panel, covs = _stationary(y)
    paths = SwitchingPath([np.zeros(len(y), np.int64)])
    warm = RegimeParameters.offsets([0.05], [2.1])
    tiny = AnnealerSettings(n_steps=5, patience=0)
    out = theta_step(panel, covs, paths, 0.5, warm, tiny, np.random.default_rng(0))
    assert penalized_nll(panel, covs, out, paths, 0.5) <= penalized_nll(panel, covs, warm, paths, 0.5)


def test_theta_step_empty_regime_unchanged():
    y = np.random.default_rng(7).exponential(2.0, 200)
    panel, covs = _stationary(y)
    paths = SwitchingPath([np.zeros(len(y), np.int64)])
    warm = RegimeParameters.offsets([0.1, -0.3], [1.0, 7.5])
    out = theta_step(panel, covs, paths, 0.0, warm, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(out.xi[1], warm.xi[1])
    np.testing.assert_array_equal(out.sigma[1], warm.sigma[1])


def test_theta_step_huge_penalty_kills_noise_covariate():
    rng = np.random.default_rng(8)
    y = rng.exponential(3.0, 1000)
    panel = ExcessPanel(["A"], [np.arange(1, 1001)], [y])
    covs = CovariatePanel(["noise"], ["local"], [rng.random((1000, 1))])
    paths = SwitchingPath([np.zeros(1000, np.int64)])
    warm = RegimeParameters([[0.0, 0.0]], [[3.0, 0.0]])
    free = theta_step(panel, covs, paths, 0.0, warm, rng=np.random.default_rng(1))
    tight = theta_step(panel, covs, paths, 1e6, free, rng=np.random.default_rng(1),
                       penalize_offsets=False)
    assert abs(tight.xi[0, 1]) < 0.01 and abs(tight.sigma[0, 1]) < 0.01


def test_theta_step_repairs_infeasible_warm_start():
    panel, _ = _stationary(np.array([1.0, 2.0]))
    paths = SwitchingPath([np.zeros(2, np.int64)])
    covs = CovariatePanel(["u"], ["local"], [np.array([[0.0], [1.0]])])
    bad = RegimeParameters([[0.9, 0.0]], [[-1.0, 0.0]])
    out = theta_step(panel, covs, paths, 0.0, bad, rng=np.random.default_rng(0))
    assert np.isfinite(penalized_nll(panel, covs, out, paths, 0.0))


def test_fit_k1_constant_path_and_oracle():
    y = np.random.default_rng(9).pareto(5.0, 2000) * 2.0 + 1e-9
    panel, covs = _stationary(y)
    res = fit(panel, covs, ModelConfig(K=1, C=3, restarts=2, seed=4))
    assert res.paths.total_switches() == 0
    xi_o, sigma_o, _ = grid_mle(y)
    assert abs(res.theta.xi[0, 0] - xi_o) < 0.03
    assert abs(res.theta.sigma[0, 0] - sigma_o) < 0.03


@pytest.fixture(scope="module")
def small_scenario():
    sc = default_scenario(seed=11)
    sc.length = 150
    sc.n_locations = 3
    return gen_panel(sc)


def test_fit_is_deterministic(small_scenario):
    panel, covs, _ = small_scenario
    cfg = ModelConfig(K=2, C=10, restarts=3, seed=5)
    a, b = fit(panel, covs, cfg), fit(panel, covs, cfg)
    assert a.penalized_nll == b.penalized_nll
    np.testing.assert_array_equal(a.theta.xi, b.theta.xi)
    np.testing.assert_array_equal(a.paths.flat(), b.paths.flat())
    assert a.trace == b.trace


def test_fit_independent_of_worker_count(small_scenario):
    panel, covs, _ = small_scenario
    cfg = ModelConfig(K=2, C=10, restarts=3, seed=5)
    a, b = fit(panel, covs, cfg, workers=1), fit(panel, covs, cfg, workers=3)
    assert a.restart_values == b.restart_values
    np.testing.assert_array_equal(a.theta.sigma, b.theta.sigma)


def test_more_restarts_never_worse(small_scenario):
    panel, covs, _ = small_scenario
    one = fit(panel, covs, ModelConfig(K=2, C=10, restarts=1, seed=2))
    many = fit(panel, covs, ModelConfig(K=2, C=10, restarts=6, seed=2))
    assert many.penalized_nll <= one.penalized_nll
    assert many.restart_values[0] == one.restart_values[0]


def test_fit_recovers_regimes(small_scenario):
    panel, covs, truth = small_scenario
    res = fit(panel, covs, ModelConfig(K=2, C=10, restarts=6, seed=0))
    assert best_permutation_accuracy(truth.flat(), res.paths.flat(), 2) >= 0.9


@pytest.mark.parametrize("lam", [0.0, 1.0])
def test_ao_trace_is_monotone(small_scenario, lam):
    panel, covs, _ = small_scenario
    res = fit(panel, covs, ModelConfig(K=2, C=10, lam=lam, restarts=3, seed=1, ao_tolerance=1e-9,
                                       max_ao_iterations=15))
    assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))


def test_ao_label_permutation_equivariance(small_scenario):
    panel, covs, _ = small_scenario
    d = build_design(panel, covs)
    rng0 = np.random.default_rng(3)
    labels = np.concatenate([random_feasible_path(n, 2, 10, rng0) for n in panel.lengths])
    theta = RegimeParameters([[0.05, 0.0], [0.0, 0.0]], [[2.0, 0.0], [6.0, 0.0]])
    cfg = ModelConfig(K=2, C=10, restarts=1)
    st = AnnealerSettings(n_steps=400)
    a = alternating_optimization(d, labels, theta, cfg, st, np.random.default_rng(42))
    b = alternating_optimization(d, 1 - labels, theta.permuted([1, 0]), cfg, st, np.random.default_rng(42))
    assert a.value == b.value
    np.testing.assert_array_equal(a.labels, 1 - b.labels)
    np.testing.assert_array_equal(a.theta.xi, b.theta.permuted([1, 0]).xi)


def test_budget_above_longest_series_is_clamped():
    panel, covs = _stationary(np.random.default_rng(0).exponential(1.0, 20))
    with pytest.warns(UserWarning, match="clamped"):
        res = fit(panel, covs, ModelConfig(K=2, C=500, restarts=1))
    assert res.config.C == 20


def test_gamma_without_finite_path_in_budget():
    with pytest.raises(NumericalError):
        gamma_step([[0.0, math.inf], [math.inf, 0.0]], 0)


def test_point_infeasible_under_all_regimes_is_reported():
    panel, covs = _stationary(np.array([1.0, 2.0, 50.0]))
    d = build_design(panel, covs)
    theta = RegimeParameters.offsets([-0.4, -0.4], [1.0, 2.0])
    with pytest.raises(InfeasiblePointError, match="time=3"):
        _gamma_all(d, theta, 1)
