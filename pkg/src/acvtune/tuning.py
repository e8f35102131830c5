"""Outer-loop tuning of approximation hyperparameters and the online pipeline.

The tuning objective at a hyperparameter ``beta`` is the projected estimator
variance from a pilot at ``beta``.  All candidates share one set of pilot
points: high-fidelity and fixed-model outputs on those points are computed
once per trial, and only the tunable models are re-run per candidate.  The
overhead of tuning is the tunable-model pilot cost of every candidate except
the one finally selected, whose outputs are reused by the estimator.
"""

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .allocation import minimum_cost
from .errors import ACVError, BudgetExhaustedError, DegenerateStatsError, InfeasibleBudgetError
from .gp import GaussianProcess, maximin_lhs, maximize_ei
from .models import CostLedger, evaluate
from .pilot import DEFAULT_GAMMA, evaluate_allocation, run_online, run_projection
from .seeding import STREAM_EGO, STREAM_POINTS, PointStream, rng_for
from .stats import PilotSample

log = logging.getLogger(__name__)

PENALTY_FACTOR = 1e6


@dataclass
class TuningConfig:
    n_iter: int = 5
    n_pilot: int = 50
    budget: float = 1000.0
    scheme: str = "ACV-MF"
    n_init: int = None
    seed: int = 0
    gamma: float = DEFAULT_GAMMA
    tune: bool = True

    def resolve(self, dim):
        n_init = self.n_init if self.n_init is not None else (3 if dim == 1 else 3 * dim)
        if self.n_iter < 1:
            raise ValueError("n_iter must be at least 1")
        if n_init < 2:
            raise ValueError("the initial design needs at least two points")
        if self.n_iter < n_init:
            raise ValueError(f"n_iter ({self.n_iter}) must be at least the initial design size ({n_init})")
        return n_init


@dataclass
class EgoDataset:
    unit: list = field(default_factory=list)
    betas: list = field(default_factory=list)
    J: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    gp_params: list = field(default_factory=list)

    def append(self, u, beta, J, flag="", gp=None):
        self.unit.append(np.asarray(u, dtype=float))
        self.betas.append(np.asarray(beta, dtype=float))
        self.J.append(float(J))
        self.flags.append(flag)
        self.gp_params.append(gp)

    def __len__(self):
        return len(self.J)


@dataclass
class TuningResult:
    beta_star: np.ndarray
    betas: list
    overhead: float
    dataset: EgoDataset
    pilot: PilotSample
    log: list
    best_index: int
    truncated: bool = False

    def to_dict(self):
        return {
            "beta_star": self.beta_star.tolist(),
            "overhead": self.overhead,
            "best_index": self.best_index,
            "truncated": self.truncated,
            "points": [b.tolist() for b in self.dataset.betas],
            "J": self.dataset.J,
            "flags": self.dataset.flags,
            "gp": self.dataset.gp_params,
            "log": [{"beta": list(b), "n_pilot": n, "unit_cost": c} for b, n, c in self.log],
        }


def unit_to_beta(ensemble, u):
    """Map the unit cube to hyperparameters on log coordinates."""
    b = np.array(ensemble.beta_bounds, dtype=float)
    return b[:, 0] * (b[:, 1] / b[:, 0]) ** np.asarray(u, dtype=float)


def beta_to_unit(ensemble, beta):
    b = np.array(ensemble.beta_bounds, dtype=float)
    return np.log(np.asarray(beta, dtype=float) / b[:, 0]) / np.log(b[:, 1] / b[:, 0])


def overhead_from_log(entries, best_index):
    """Tuning overhead: tunable pilot cost of every candidate but the chosen one."""
    return math.fsum(n * c for k, (_, n, c) in enumerate(entries) if k != best_index)


def tunable_cost(ensemble, betas):
    return math.fsum(ensemble.models[i].cost(betas[i]) for i in ensemble.tunable_ids)


def base_pilot(ensemble, n_pilot, stream, ledger, seed=None):
    """High-fidelity and fixed-model pilot columns, shared by every candidate."""
    pts = stream.points(0, n_pilot)
    betas = ensemble.hand_beta
    vals = np.full((n_pilot, ensemble.M + 1), np.nan)
    fixed = [i for i in range(ensemble.M + 1) if i not in ensemble.tunable_ids]
    for i in fixed:
        vals[:, i] = evaluate(ensemble, i, betas[i], pts, ledger, "pilot")
    cost = n_pilot * math.fsum([1.0] + [ensemble.models[i].cost(betas[i]) for i in fixed if i])
    return PilotSample(vals, pts, betas, seed, cost)


def candidate_pilot(ensemble, base, betas, ledger=None, category="tuning"):
    """Fill the tunable columns of ``base`` at ``betas``."""
    ids = ensemble.tunable_ids
    cols = [evaluate(ensemble, i, betas[i], base.points, ledger, category) for i in ids]
    return base.with_columns(ids, cols, betas, base.n * tunable_cost(ensemble, betas))


def objective_J(ensemble, beta, budget, n_pilot, scheme="ACV-MF", seed=0, base=None, ledger=None,
                stream=None):
    """Projected variance at ``beta``; returns ``(J, pilot, flag)``.

    Degenerate statistics or an unaffordable pilot give a large finite
    penalty so the surrogate stays well defined.
    """
    betas = ensemble.expand_beta(beta)
    if base is None:
        stream = stream or PointStream(ensemble.inputs, seed, STREAM_POINTS)
        base = base_pilot(ensemble, n_pilot, stream, ledger, seed)
    pilot = candidate_pilot(ensemble, base, betas, ledger)
    varq = float(np.var(base.values[:, 0], ddof=1))
    try:
        sol, stats, _ = run_projection(ensemble, betas, budget, scheme, n_pilot, seed, pilot=pilot)
    except (DegenerateStatsError, InfeasibleBudgetError) as exc:
        log.info("tuning objective penalized at %s: %s", beta, exc)
        return PENALTY_FACTOR * varq, pilot, "penalty"
    return sol.variance, pilot, ""


def _fit_and_propose(ds, d, rng):
    X = np.array(ds.unit)
    y = np.log(np.array(ds.J))
    try:
        gp = GaussianProcess().fit(X, y, rng)
        u, _ = maximize_ei(gp, float(np.min(y)), d, rng)
        return u, gp.params(), ""
    except (np.linalg.LinAlgError, ValueError) as exc:
        warnings.warn(f"GP fit failed ({exc}); using a random candidate", stacklevel=2)
        return rng.random(d), None, "random"


def ego_tune(ensemble, config, ledger=None, stream=None, base=None):
    """Efficient global optimization of the tunable hyperparameters."""
    d = ensemble.beta_dim
    if d == 0:
        raise ACVError("the ensemble has no tunable models")
    n_init = config.resolve(d)
    ledger = ledger if ledger is not None else CostLedger()
    stream = stream or PointStream(ensemble.inputs, config.seed, STREAM_POINTS)
    # Lower bound on any run: the cheapest possible pilot plus one candidate.
    w_min = ensemble.costs(ensemble.expand_beta(unit_to_beta(ensemble, np.ones(d))))
    floor = config.n_pilot * (1.0 + float(np.sum(w_min)))
    if floor >= config.budget:
        raise InfeasibleBudgetError(
            f"budget {config.budget} cannot pay for a {config.n_pilot}-sample pilot (at least {floor:.6g})")
    if base is None:
        base = base_pilot(ensemble, config.n_pilot, stream, ledger, config.seed)
    rng = rng_for(config.seed, STREAM_EGO)
    design = maximin_lhs(n_init, d, rng)
    ds = EgoDataset()
    entries = []
    pilots = []
    spans = []
    truncated = False
    for t in range(config.n_iter):
        if t < n_init:
            u, gp, flag = design[t], None, ""
        else:
            u, gp, flag = _fit_and_propose(ds, d, rng)
        beta = unit_to_beta(ensemble, u)
        betas = ensemble.expand_beta(beta)
        unit = tunable_cost(ensemble, betas)
        # Guard: never spend tuning money that would leave no room for the estimator.
        w = ensemble.costs(betas)
        reserve = minimum_cost(w, "ACV-MF", ensemble.M, None, config.n_pilot) - config.n_pilot * (1 + np.sum(w))
        if ds.J and ledger.charged() + config.n_pilot * unit + max(reserve, 0.0) > config.budget:
            truncated = True
            log.warning("tuning stopped after %d candidates to stay within budget", len(ds))
            break
        first = len(ledger.entries)
        J, pilot, jflag = objective_J(ensemble, beta, config.budget, config.n_pilot, config.scheme,
                                      config.seed, base, ledger)
        ds.append(u, beta, J, "+".join(f for f in (flag, jflag) if f), gp)
        entries.append((tuple(float(b) for b in beta), config.n_pilot, unit))
        pilots.append(pilot)
        spans.append((first, len(ledger.entries)))
    best = int(np.argmin(ds.J))
    # The chosen candidate's pilot is reused downstream, so it is pilot cost.
    ledger.relabel(range(*spans[best]), "pilot")
    overhead = overhead_from_log(entries, best)
    beta_star = ds.betas[best]
    res = TuningResult(beta_star, ensemble.expand_beta(beta_star), overhead, ds, pilots[best], entries, best,
                       truncated)
    return res


def write_tuning_trace(path, tuning):
    """Per-iteration CSV from ``TuningResult.to_dict()``: beta, J, cumulative cost, GP parameters."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "beta", "J", "cumulative_cost", "flag", "gp"])
        cum = []
        for k, entry in enumerate(tuning["log"]):
            cum.append(entry["n_pilot"] * entry["unit_cost"])
            wr.writerow([k + 1, json.dumps(entry["beta"]), repr(tuning["J"][k]), repr(math.fsum(cum)),
                         tuning["flags"][k], json.dumps(tuning["gp"][k], sort_keys=True)])


def run_pipeline(ensemble, config, ledger=None):
    """Tune, allocate with the remaining budget, evaluate and assemble.

    With ``config.tune`` off (or no tunable model) the hand-selected
    hyperparameters are used and this is the hand-selected baseline.
    """
    ledger = ledger if ledger is not None else CostLedger()
    stream = PointStream(ensemble.inputs, config.seed, STREAM_POINTS)
    tuning = None
    overhead = 0.0
    pilot = None
    betas = ensemble.hand_beta
    try:
        if config.tune and ensemble.beta_dim:
            tuning = ego_tune(ensemble, config, ledger, stream)
            betas, overhead, pilot = tuning.betas, tuning.overhead, tuning.pilot
        sol, stats, pilot, info = run_online(ensemble, betas, config.budget - overhead, config.scheme,
                                             config.n_pilot, config.gamma, config.seed, ledger, stream, pilot)
        rep = evaluate_allocation(ensemble, betas, sol, stats, pilot, stream, ledger, config.budget)
    except (InfeasibleBudgetError, DegenerateStatsError) as exc:
        raise BudgetExhaustedError(str(exc), ledger.summary()) from exc
    if ledger.charged() > config.budget + 1e-9:
        raise BudgetExhaustedError(f"spent {ledger.charged()} of budget {config.budget}", ledger.summary())
    rep.ledger["overhead"] = overhead
    rep.extra.update({
        "beta_star": ensemble.flatten_beta(betas).tolist(),
        "allocation": sol.to_dict(),
        "online": {"rounds": info.rounds, "reason": info.reason, "trace": info.trace},
        "tuning": tuning.to_dict() if tuning is not None else None,
    })
    return rep
