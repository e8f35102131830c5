import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from acvtune.errors import BudgetExhaustedError, InfeasibleBudgetError
from acvtune.gp import GaussianProcess, expected_improvement, maximin_lhs, maximize_ei, se_kernel
from acvtune.models import CostLedger
from acvtune.tuning import (TuningConfig, beta_to_unit, ego_tune, objective_J, overhead_from_log, run_pipeline,
                            unit_to_beta, write_tuning_trace)


def test_gp_interpolates_with_pinned_zero_noise():
    rng = np.random.default_rng(0)
    X = rng.random((8, 2))
    y = np.sin(3 * X[:, 0]) + X[:, 1] ** 2
    gp = GaussianProcess(noise=0.0).fit(X, y, rng)
    mu, sd = gp.predict(X)
    np.testing.assert_allclose(mu, y, atol=1e-4)
    assert np.all(sd < 1e-3)


def test_gp_posterior_matches_direct_formula():
    rng = np.random.default_rng(1)
    X = rng.random((6, 1))
    y = np.cos(4 * X[:, 0])
    gp = GaussianProcess().fit(X, y, rng)
    # rebuild the posterior mean from the fitted hyperparameters
    ys = (y - y.mean()) / y.std()
    K = se_kernel(X, X, gp.lengths, gp.signal) + (gp.noise_fit + 1e-10) * np.eye(6)
    one = np.ones(6)
    m = one @ np.linalg.solve(K, ys) / (one @ np.linalg.solve(K, one))
    Xs = np.linspace(0, 1, 5)[:, None]
    ks = se_kernel(Xs, X, gp.lengths, gp.signal)
    ref = (m + ks @ np.linalg.solve(K, ys - m)) * y.std() + y.mean()
    np.testing.assert_allclose(gp.predict(Xs)[0], ref, rtol=1e-8, atol=1e-10)


def test_expected_improvement_closed_form():
    assert expected_improvement(np.array([1.0]), np.array([0.0]), 0.5)[0] == 0.0
    assert expected_improvement(np.array([0.0]), np.array([0.0]), 0.5)[0] == 0.5
    mu, sd, best = 0.3, 0.2, 0.5
    z = (best - mu) / sd
    ref = (best - mu) * norm.cdf(z) + sd * norm.pdf(z)
    assert expected_improvement(np.array([mu]), np.array([sd]), best)[0] == pytest.approx(ref, rel=1e-12)


def test_ei_vanishes_at_data_and_maximizer_moves_away():
    rng = np.random.default_rng(2)
    X = np.array([[0.1], [0.5], [0.9]])
    y = np.array([1.0, 0.2, 0.8])
    gp = GaussianProcess(noise=0.0).fit(X, y, rng)
    mu, sd = gp.predict(X)
    # zero up to the jitter floor of the interpolating model
    assert np.all(expected_improvement(mu, sd, y.min()) < 1e-5)
    u, ei = maximize_ei(gp, y.min(), 1, rng)
    assert ei > 0 and 0 <= u[0] <= 1
    assert np.min(np.abs(X[:, 0] - u[0])) > 1e-3


@pytest.mark.parametrize("n,d", [(3, 1), (6, 2), (10, 3)])
def test_maximin_lhs_is_latin(n, d):
    X = maximin_lhs(n, d, np.random.default_rng(n))
    assert X.shape == (n, d)
    for k in range(d):
        assert sorted(np.floor(X[:, k] * n).astype(int)) == list(range(n))


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0))
def test_unit_cube_round_trip(traj1d, u):
    beta = unit_to_beta(traj1d, [u])
    lo, hi = traj1d.beta_bounds[0]
    assert lo * (1 - 1e-12) <= beta[0] <= hi * (1 + 1e-12)
    assert beta_to_unit(traj1d, beta)[0] == pytest.approx(u, abs=1e-12)


def test_overhead_formula():
    log = [((0.01,), 50, 0.1), ((0.02,), 50, 0.05), ((0.04,), 50, 0.025)]
    assert overhead_from_log(log, 1) == pytest.approx(50 * 0.1 + 50 * 0.025)
    assert overhead_from_log(log[:1], 0) == 0.0


def test_tuning_config_validation():
    with pytest.raises(ValueError):
        TuningConfig(n_iter=2).resolve(1)
    with pytest.raises(ValueError):
        TuningConfig(n_iter=5).resolve(2)
    assert TuningConfig(n_iter=6).resolve(2) == 6
    assert TuningConfig().resolve(1) == 3


def test_ego_tune_ledger_and_overhead(traj1d):
    led = CostLedger()
    cfg = TuningConfig(n_iter=5, n_pilot=30, budget=1000, seed=4)
    res = ego_tune(traj1d, cfg, led)
    assert len(res.dataset) == 5
    assert led.total("tuning") == pytest.approx(res.overhead, rel=1e-12)
    assert res.overhead == overhead_from_log(res.log, res.best_index)
    assert res.dataset.J[res.best_index] == min(res.dataset.J)
    lo, hi = traj1d.beta_bounds[0]
    assert lo <= res.beta_star[0] <= hi
    again = ego_tune(traj1d, cfg, CostLedger())
    assert again.to_dict() == res.to_dict()


def test_tuning_trace(tmp_path, traj1d):
    res = ego_tune(traj1d, TuningConfig(n_iter=4, n_pilot=20, seed=1), CostLedger())
    write_tuning_trace(tmp_path / "t.csv", res.to_dict())
    rows = (tmp_path / "t.csv").read_text().splitlines()
    assert rows[0].startswith("iteration,beta,J,cumulative_cost") and len(rows) == 5


def test_objective_penalty_stays_finite(traj1d):
    # a pilot too large for the budget is penalized, not raised
    J, pilot, flag = objective_J(traj1d, [0.05], budget=30.0, n_pilot=25, seed=0)
    assert flag == "penalty" and math.isfinite(J) and J > 1.0


def test_ego_rejects_unaffordable_pilot(traj1d):
    with pytest.raises(InfeasibleBudgetError):
        ego_tune(traj1d, TuningConfig(budget=20, n_pilot=50), CostLedger())


@pytest.mark.parametrize("tune", [True, False])
def test_pipeline_stays_within_budget(traj1d, tune):
    led = CostLedger()
    rep = run_pipeline(traj1d, TuningConfig(n_iter=5, n_pilot=40, budget=800, seed=2, tune=tune), led)
    assert led.charged() <= 800 + 1e-9
    assert rep.ledger["overhead"] == (led.total("tuning") if tune else 0.0)
    assert rep.extra["online"]["reason"] in ("converged", "budget", "mc_fallback", "max_rounds")
    assert math.isfinite(rep.qtilde)


def test_pipeline_two_dimensional(traj2d):
    led = CostLedger()
    rep = run_pipeline(traj2d, TuningConfig(n_iter=6, n_pilot=30, budget=1000, seed=3), led)
    assert len(rep.extra["beta_star"]) == 2 and led.charged() <= 1000 + 1e-9


def test_pipeline_budget_exhausted(traj1d):
    with pytest.raises(BudgetExhaustedError):
        run_pipeline(traj1d, TuningConfig(budget=5, n_pilot=50))
