import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acvtune.allocation import (enumerate_trees, minimum_cost, optimize, optimize_allocation,
                                optimize_allocation_gmf)
from acvtune.errors import InfeasibleBudgetError
from acvtune.sampleset import build_profile, compute_fF
from acvtune.acv import predicted_variance
from acvtune.stats import ModelStats

from oracles import all_parent_maps, mfmc_two_model_optimum, rooted_labelled_forests


def _stats(rho, sigma=None, P=None, varQ=1.0):
    rho = np.atleast_1d(np.asarray(rho, float))
    M = rho.size
    return ModelStats(varQ, np.ones(M) if sigma is None else np.asarray(sigma, float), rho,
                      np.eye(M) if P is None else np.asarray(P, float))


def _random_stats(rng, M):
    A = rng.normal(size=(M + 1, M + 2))
    A[1:] += 2.0 * A[0]  # correlated with the high-fidelity row
    return ModelStats.from_covariance(A @ A.T + 0.01 * np.eye(M + 1))


@pytest.mark.parametrize("rho,w,budget", [(0.9, 0.01, 100.0), (0.99, 0.001, 500.0), (0.7, 0.05, 1000.0)])
def test_two_model_relaxed_matches_closed_form(rho, w, budget):
    sol = optimize_allocation(_stats(rho), [w], budget, "ACV-MF")
    r, v = mfmc_two_model_optimum(rho, w, budget)
    assert sol.relaxed["variance"] == pytest.approx(v, rel=1e-5)
    assert sol.relaxed["n_lf"][0] / sol.relaxed["N"] == pytest.approx(r, rel=1e-3)
    # the integer answer is close to the continuous one and feasible
    assert sol.cost <= budget + 1e-9
    assert sol.variance == pytest.approx(v, rel=0.05)


def test_mfmc_equals_acvmf_for_one_model():
    s = _stats(0.95)
    a = optimize_allocation(s, [0.02], 300.0, "ACV-MF")
    b = optimize_allocation(s, [0.02], 300.0, "MFMC")
    assert a.relaxed["variance"] == pytest.approx(b.relaxed["variance"], rel=1e-8)


@pytest.mark.parametrize("scheme", ["MLMC", "MFMC", "ACV-IS", "ACV-MF"])
def test_integer_solution_is_feasible_and_consistent(scheme):
    rng = np.random.default_rng(5)
    stats = _random_stats(rng, 3)
    w = np.array([0.2, 0.05, 0.01])
    sol = optimize_allocation(stats, w, 400.0, scheme)
    assert sol.cost <= 400.0 + 1e-9
    if not sol.use_mc:
        prof = sol.profile()
        assert prof.cost(w) == pytest.approx(sol.cost)
        var, _ = predicted_variance(stats, compute_fF(prof), sol.N)
        assert var == pytest.approx(sol.variance, rel=1e-9)
        assert sol.N >= 2 and np.all(sol.eval_counts() >= 2)
    assert sol.variance <= stats.varQ / 400.0 * (1 + 1e-12)


def test_lower_bound_respected():
    stats = _stats([0.99, 0.9], P=[[1, 0.9], [0.9, 1]])
    sol = optimize_allocation(stats, [0.01, 0.001], 500.0, "ACV-MF", n_min=60)
    assert sol.N >= 60 and np.all(sol.eval_counts() >= 60)


def test_uncorrelated_models_fall_back_to_mc():
    sol = optimize_allocation(_stats([0.0]), [0.5], 100.0, "ACV-MF")
    assert sol.use_mc and sol.N == 100
    assert sol.variance == pytest.approx(1.0 / 100)


def test_infeasible_budget():
    with pytest.raises(InfeasibleBudgetError):
        optimize_allocation(_stats([0.9, 0.9], P=[[1, .5], [.5, 1]]), [0.5, 0.5], 3.0, "ACV-MF")
    assert minimum_cost([0.5, 0.5], "ACV-MF", 2) == pytest.approx(2 + 0.5 * 3 + 0.5 * 3)


def test_rejects_bad_costs():
    with pytest.raises(ValueError):
        optimize_allocation(_stats([0.9]), [0.0], 100.0)


@pytest.mark.parametrize("M", [1, 2, 3, 4])
def test_tree_enumeration_counts(M):
    trees = enumerate_trees(M)
    assert len(trees) == rooted_labelled_forests(M)
    assert sorted(t.parents for t in trees) == sorted(all_parent_maps(M))
    assert trees[0].is_star()


def test_gmf_is_never_worse_than_acvmf():
    rng = np.random.default_rng(9)
    for _ in range(3):
        stats = _random_stats(rng, 3)
        w = np.sort(rng.uniform(0.001, 0.3, size=3))[::-1]
        g = optimize_allocation_gmf(stats, w, 800.0)
        a = optimize_allocation(stats, w, 800.0, "ACV-MF")
        assert g.variance <= a.variance * (1 + 1e-12)
        assert optimize(stats, w, 800.0, "GMF").variance == g.variance


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from(["MLMC", "MFMC", "ACV-IS", "ACV-MF"]))
def test_budget_never_exceeded(seed, scheme):
    rng = np.random.default_rng(seed)
    M = int(rng.integers(1, 4))
    stats = _random_stats(rng, M)
    w = rng.uniform(0.001, 0.5, size=M)
    budget = float(rng.uniform(50, 3000))
    try:
        sol = optimize_allocation(stats, w, budget, scheme)
    except InfeasibleBudgetError:
        return
    assert sol.cost <= budget + 1e-9
    assert sol.variance <= stats.varQ / np.floor(budget) * (1 + 1e-12)


def test_allocation_is_deterministic():
    stats = _random_stats(np.random.default_rng(2), 3)
    a = optimize_allocation(stats, [0.1, 0.02, 0.005], 700.0, "ACV-MF", seed=4)
    b = optimize_allocation(stats, [0.1, 0.02, 0.005], 700.0, "ACV-MF", seed=4)
    assert a.to_dict() == b.to_dict()
    assert build_profile("ACV-MF", a.N, a.n_lf).N == a.N
