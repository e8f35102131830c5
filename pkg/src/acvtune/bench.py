"""Experiment harness: baselines, MSE over trials, variance grids and sweeps.

Every trial ``j`` of a batch derives its seed from ``(base_seed, j)`` and the
same trial seed is used for every solution type, so the types are compared
on common random numbers.  Trials run in worker processes when ``jobs > 1``;
results are ordered by trial index, so output does not depend on ``jobs``.
"""

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.stats import qmc

from .models import CostLedger, evaluate, make_benchmark_ensemble
from .pilot import DEFAULT_N_REF, evaluate_allocation, run_offline
from .allocation import optimize
from .seeding import STREAM_MISC, STREAM_POINTS, PointStream, rng_for
from .stats import PilotSample, estimate_stats
from .tuning import TuningConfig, ego_tune, run_pipeline

KINDS = ("MonteCarlo", "HandSelected", "BestCase", "Tuned")


def trial_seed(base_seed, j):
    """Seed of trial ``j``.

    Consecutive integers give statistically independent streams once they
    pass through ``SeedSequence``, and trial 0 runs on the base seed itself so
    a one-trial batch reproduces a single ``estimate`` run.
    """
    return int(base_seed) + int(j)


@dataclass
class TrialBatch:
    kind: str
    budget: float
    base_seed: int
    values: list = field(default_factory=list)
    records: list = field(default_factory=list)

    @property
    def n_trial(self):
        return len(self.values)


@dataclass
class VarianceGrid:
    """Oracle variance on a log-spaced hyperparameter grid with an interpolator."""

    axes: list
    values: np.ndarray
    budget: float
    scheme: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if np.any(self.values <= 0):
            raise ValueError("grid variances must be positive")
        self._logs = [np.log(np.asarray(a, dtype=float)) for a in self.axes]
        self._interp = RegularGridInterpolator(self._logs, self.values, method="linear")

    def __call__(self, beta):
        """Interpolated variance, (multi)linear in log-hyperparameter coordinates."""
        x = np.log(np.asarray(beta, dtype=float).reshape(-1))
        x = np.clip(x, [a[0] for a in self._logs], [a[-1] for a in self._logs])
        return float(self._interp(x[None, :])[0])

    def argmin(self):
        idx = np.unravel_index(int(np.argmin(self.values)), self.values.shape)
        return np.array([self.axes[k][i] for k, i in enumerate(idx)])

    def to_dict(self):
        return {"axes": [np.asarray(a).tolist() for a in self.axes], "values": self.values.tolist(),
                "budget": self.budget, "scheme": self.scheme}

    @classmethod
    def from_dict(cls, d):
        return cls([np.array(a) for a in d["axes"]], np.array(d["values"]), d["budget"], d["scheme"])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow([f"beta{k}" for k in range(len(self.axes))] + ["variance"])
            for idx in np.ndindex(self.values.shape):
                wr.writerow([repr(float(self.axes[k][i])) for k, i in enumerate(idx)]
                            + [repr(float(self.values[idx]))])


def compute_mse(batch, q_ref):
    values = batch.values if isinstance(batch, TrialBatch) else list(batch)
    if not values:
        raise ValueError("empty batch")
    return math.fsum((v - q_ref) ** 2 for v in values) / len(values)


def variance_reduction(v_mc, v_est):
    if not (v_mc > 0 and v_est > 0):
        raise ValueError("variances must be positive")
    return v_mc / v_est


def tuned_variance_estimate(grid, beta_star, overhead, budget):
    """Grid variance at the tuned point, inflated for the budget lost to tuning."""
    if overhead >= budget:
        raise ValueError("tuning overhead must be below the budget")
    v = grid(beta_star) if callable(grid) else float(grid)
    return v * budget / (budget - overhead)


def reference_mean(ensemble, log2_n=17, seed=0):
    """High-fidelity mean by scrambled Sobol quasi-Monte Carlo."""
    sob = qmc.Sobol(ensemble.inputs.dimension, scramble=True, seed=rng_for(seed, STREAM_MISC, 7))
    u = sob.random_base2(log2_n)
    vals = evaluate(ensemble, 0, [], ensemble.inputs.from_unit(u))
    return math.fsum(vals) / vals.size


def build_variance_grid(ensemble, budget, scheme="ACV-MF", n_points=25, n_ref=DEFAULT_N_REF, seed=0):
    """Oracle variance over a log-spaced grid of the tunable hyperparameters.

    Each distinct hyperparameter value of each tunable model is evaluated
    once on the shared reference points and reused across grid nodes.
    """
    bounds = ensemble.beta_bounds
    axes = [np.geomspace(lo, hi, n_points) for lo, hi in bounds]
    stream = PointStream(ensemble.inputs, seed, STREAM_MISC)
    pts = stream.points(0, n_ref)
    base = ensemble.hand_beta
    fixed = [i for i in range(ensemble.M + 1) if i not in ensemble.tunable_ids]
    Y = np.empty((n_ref, ensemble.M + 1))
    for i in fixed:
        Y[:, i] = evaluate(ensemble, i, base[i], pts)
    cols = {}
    k = 0
    for i in ensemble.tunable_ids:
        for a in range(ensemble.models[i].n_beta):
            for v in axes[k]:
                cols[(i, float(v))] = evaluate(ensemble, i, [v], pts)
            k += 1
    values = np.empty([n_points] * len(axes))
    for idx in np.ndindex(values.shape):
        beta = np.array([axes[d][j] for d, j in enumerate(idx)])
        betas = ensemble.expand_beta(beta)
        for d, i in enumerate(ensemble.tunable_ids):
            Y[:, i] = cols[(i, float(beta[d]))]
        stats = estimate_stats(Y)
        values[idx] = optimize(stats, ensemble.costs(betas), budget, scheme, 2, seed).variance
    return VarianceGrid(axes, values, budget, scheme)


# ---------------------------------------------------------------------------
# Trials


def _trial(args):
    """One trial of one solution type; top level so worker processes can run it."""
    kind, config, budget, n_pilot, n_iter, scheme, seed, best = args
    ens = make_benchmark_ensemble(config)
    ledger = CostLedger()
    rec = {"seed": seed}
    if kind == "MonteCarlo":
        stream = PointStream(ens.inputs, seed, STREAM_POINTS)
        n = int(math.floor(budget + 1e-9))
        vals = evaluate(ens, 0, [], stream.points(0, n), ledger, "allocation")
        q = math.fsum(vals) / n
        rec.update(overhead=0.0, beta_star=[])
    elif kind == "BestCase":
        stats, sol, betas = best
        stream = PointStream(ens.inputs, seed, STREAM_POINTS)
        empty = PilotSample(np.empty((0, ens.M + 1)), np.empty((0, ens.inputs.dimension)), betas, seed)
        rep = evaluate_allocation(ens, betas, sol, stats, empty, stream, ledger, budget)
        q = rep.qtilde
        rec.update(overhead=0.0, beta_star=ens.flatten_beta(betas).tolist(), predicted_variance=sol.variance)
    elif kind in ("HandSelected", "Tuned"):
        cfg = TuningConfig(n_iter=n_iter, n_pilot=n_pilot, budget=budget, scheme=scheme, seed=seed,
                           tune=kind == "Tuned")
        rep = run_pipeline(ens, cfg, ledger)
        q = rep.qtilde
        rec.update(overhead=rep.ledger["overhead"], beta_star=rep.extra["beta_star"],
                   predicted_variance=rep.predicted_variance)
    else:
        raise ValueError(f"unknown solution type {kind!r}")
    rec.update(qtilde=q, charged=ledger.charged())
    return rec


def _tune_trial(args):
    config, budget, n_pilot, n_iter, scheme, seed = args
    ens = make_benchmark_ensemble(config)
    ledger = CostLedger()
    res = ego_tune(ens, TuningConfig(n_iter=n_iter, n_pilot=n_pilot, budget=budget, scheme=scheme, seed=seed),
                   ledger)
    return {"seed": seed, "beta_star": res.beta_star.tolist(), "overhead": res.overhead,
            "ledger_tuning": ledger.total("tuning"), "truncated": res.truncated,
            "log": [list(e[0]) + [e[1], e[2]] for e in res.log], "best_index": res.best_index}


def _map(fn, tasks, jobs):
    if jobs <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks, chunksize=1))


def best_case_setup(ensemble, grid, budget, scheme="ACV-MF", n_ref=DEFAULT_N_REF, seed=0):
    """Offline statistics and allocation at the grid-optimal hyperparameters."""
    betas = ensemble.expand_beta(grid.argmin())
    sol, stats = run_offline(ensemble, betas, budget, scheme, n_ref, seed)
    return stats, sol, betas


def run_baseline(kind, config, budget, n_trial=100, base_seed=0, n_pilot=50, n_iter=5, scheme="ACV-MF",
                 grid=None, jobs=1, n_ref=DEFAULT_N_REF):
    """A batch of seeded trials of one solution type."""
    best = None
    if kind == "BestCase":
        if grid is None:
            raise ValueError("BestCase needs a variance grid; run the grid sweep first")
        best = best_case_setup(make_benchmark_ensemble(config), grid, budget, scheme, n_ref, base_seed)
    tasks = [(kind, config, budget, n_pilot, n_iter, scheme, trial_seed(base_seed, j), best)
             for j in range(n_trial)]
    recs = _map(_trial, tasks, jobs)
    return TrialBatch(kind, budget, base_seed, [r["qtilde"] for r in recs], recs)


def tuning_trials(config, budget, n_pilot, n_iter, n_trial=100, base_seed=0, scheme="ACV-MF", jobs=1):
    tasks = [(config, budget, n_pilot, n_iter, scheme, trial_seed(base_seed, j)) for j in range(n_trial)]
    return _map(_tune_trial, tasks, jobs)


def improved_trials(grid, hand_beta, records):
    """Share of tuning trials whose grid variance beats the hand-selected point."""
    v_hand = grid(hand_beta)
    better = [grid(r["beta_star"]) < v_hand for r in records]
    return sum(better) / len(better)


def quantiles(values):
    q = np.quantile(np.asarray(values, dtype=float), [0.0, 0.25, 0.5, 0.75, 1.0])
    return dict(zip(("min", "q1", "median", "q3", "max"), (float(x) for x in q)))


def batch_summary(batch, q_ref):
    sq = [(v - q_ref) ** 2 for v in batch.values]
    over = [100.0 * r.get("overhead", 0.0) / batch.budget for r in batch.records]
    return {"kind": batch.kind, "budget": batch.budget, "n_trial": batch.n_trial,
            "mse": compute_mse(batch, q_ref), "squared_error": quantiles(sq), "overhead_pct": quantiles(over)}


TRIAL_COLUMNS = ["n_pilot", "n_iter", "kind", "budget", "trial", "seed", "qtilde", "squared_error", "overhead",
                 "charged", "beta_star"]


def batch_rows(batch, q_ref, n_pilot="", n_iter=""):
    for j, r in enumerate(batch.records):
        yield [n_pilot, n_iter, batch.kind, repr(float(batch.budget)), j, r["seed"], repr(r["qtilde"]),
               repr((r["qtilde"] - q_ref) ** 2), repr(float(r["overhead"])), repr(float(r["charged"])),
               json.dumps(r["beta_star"])]


def write_trials_csv(path, cells, q_ref):
    """One row per trial; ``cells`` is a list of ``(n_pilot, n_iter, batch)``."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(TRIAL_COLUMNS)
        for n_pilot, n_iter, batch in cells:
            wr.writerows(batch_rows(batch, q_ref, n_pilot, n_iter))


def run_sweep(config, budgets, n_pilots, n_iters, kinds, n_trial, base_seed, q_ref, grid=None, scheme="ACV-MF",
              jobs=1, out_dir=None, cells=None):
    """Cartesian sweep; per-trial CSV rows and a JSON summary per cell.

    Solution types that ignore a knob are run once and shared across the
    cells that differ only in that knob: MonteCarlo and BestCase ignore
    both pilot size and iteration count, HandSelected ignores iterations.
    """
    cells = cells if cells is not None else []
    summaries, cache = [], {}
    for budget in budgets:
        for n_pilot in n_pilots:
            for n_iter in n_iters:
                for kind in kinds:
                    key = (kind, budget, n_pilot if kind in ("HandSelected", "Tuned") else None,
                           n_iter if kind == "Tuned" else None)
                    if key not in cache:
                        cache[key] = run_baseline(kind, config, budget, n_trial, base_seed, n_pilot, n_iter,
                                                  scheme, grid, jobs)
                    batch = cache[key]
                    s = batch_summary(batch, q_ref)
                    s.update(n_pilot=n_pilot, n_iter=n_iter)
                    summaries.append(s)
                    cells.append((n_pilot, n_iter, batch))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_trials_csv(os.path.join(out_dir, "trials.csv"), cells, q_ref)
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump({"q_ref": q_ref, "cells": summaries}, fh, indent=2, sort_keys=True)
    return summaries
