"""The three pilot modes and evaluation of a chosen allocation.

Pilot points are always the first points of the trial's point stream and the
shared set ``z`` of every profile starts at stream index 0, so pilot outputs
are reused as the head of ``z`` instead of being thrown away.
"""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .acv import EstimatorReport, assemble_estimator, mc_estimate
from .allocation import minimum_cost, optimize
from .errors import InfeasibleBudgetError
from .models import CostLedger, evaluate
from .sampleset import SchemeMatrices, compute_fF
from .seeding import STREAM_MISC, STREAM_POINTS, PointStream
from .stats import PilotSample, draw_pilot, estimate_stats

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.5
DEFAULT_MAX_ROUNDS = 20
DEFAULT_N_REF = 10000


@dataclass
class PilotMode:
    kind: str
    n_pilot: int
    gamma: float = DEFAULT_GAMMA
    max_rounds: int = DEFAULT_MAX_ROUNDS

    def __post_init__(self):
        if self.kind not in ("offline", "projection", "online"):
            raise ValueError(f"unknown pilot mode {self.kind!r}")
        if self.n_pilot < 2:
            raise ValueError("n_pilot must be at least 2")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")


@dataclass
class OnlineInfo:
    rounds: int = 0
    reason: str = ""
    exhausted: bool = False
    trace: list = field(default_factory=list)


def _pilot_cost(ensemble, betas, n):
    return n * (1.0 + float(np.sum(ensemble.costs(betas))))


def run_offline(ensemble, betas, budget, scheme="ACV-MF", n_ref=DEFAULT_N_REF, seed=0, ledger=None):
    """Oracle statistics from a large free pilot, allocation over the full budget."""
    stream = PointStream(ensemble.inputs, seed, STREAM_MISC)
    pilot = draw_pilot(ensemble, betas, n_ref, seed, ledger, category="offline", stream=stream)
    stats = estimate_stats(pilot)
    sol = optimize(stats, ensemble.costs(betas), budget, scheme, 2, seed)
    return sol, stats


def run_projection(ensemble, betas, budget, scheme="ACV-MF", n_pilot=50, seed=0, ledger=None, stream=None,
                   pilot=None):
    """Allocation from pilot statistics with the pilot as a lower bound.

    No evaluations beyond the pilot are made; the returned solution's
    variance is the projected one.
    """
    cost = _pilot_cost(ensemble, betas, n_pilot)
    if cost >= budget:
        raise InfeasibleBudgetError(f"pilot cost {cost:.6g} is not below the budget {budget}")
    if pilot is None:
        stream = stream or PointStream(ensemble.inputs, seed, STREAM_POINTS)
        pilot = draw_pilot(ensemble, betas, n_pilot, seed, ledger, stream=stream)
    stats = estimate_stats(pilot)
    w = ensemble.costs(betas)
    sol = optimize(stats, w, pilot_budget(scheme, budget, w, pilot.n), scheme, pilot.n, seed)
    return sol, stats, pilot


def _affordable(w, scheme, M, budget, n_now, want):
    """Largest k <= want such that an allocation with N >= n_now + k fits."""
    lo, hi = 0, want
    if minimum_cost(w, scheme_base(scheme), M, None, n_now + want) <= budget:
        return want
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if minimum_cost(w, scheme_base(scheme), M, None, n_now + mid) <= budget:
            lo = mid
        else:
            hi = mid - 1
    return lo


def pilot_budget(scheme, budget, w, n_pilot):
    """Budget left for the allocation optimizer once pilot waste is removed.

    Under MLMC only the first level contains the shared set, so pilot outputs
    of the deeper levels cannot be reused and are pure overhead.
    """
    if scheme == "MLMC":
        return budget - n_pilot * float(np.sum(w[1:]))
    return budget


def scheme_base(scheme):
    # The tree search only changes the layout; its cheapest layout is the star.
    return "ACV-MF" if scheme == "GMF" else scheme


def run_online(ensemble, betas, budget, scheme="ACV-MF", n_pilot=50, gamma=DEFAULT_GAMMA, seed=0, ledger=None,
               stream=None, pilot=None, max_rounds=DEFAULT_MAX_ROUNDS):
    """Grow the shared pilot towards the optimal ``N`` with under-relaxation.

    Each round solves the allocation from current statistics, computes the
    shortfall ``dN`` of the shared set and, if positive, evaluates
    ``ceil(gamma * dN)`` more pilot points on every model.
    """
    mode = PilotMode("online", n_pilot, gamma, max_rounds)
    ledger = ledger if ledger is not None else CostLedger()
    stream = stream or PointStream(ensemble.inputs, seed, STREAM_POINTS)
    w = ensemble.costs(betas)
    if _pilot_cost(ensemble, betas, n_pilot) >= budget:
        raise InfeasibleBudgetError(f"pilot of {n_pilot} samples does not fit in budget {budget}")
    if pilot is None:
        pilot = draw_pilot(ensemble, betas, n_pilot, seed, ledger, stream=stream)
    stats = estimate_stats(pilot)
    info = OnlineInfo()
    per_point = 1.0 + float(np.sum(w))
    sol = None
    for rnd in range(1, mode.max_rounds + 1):
        info.rounds = rnd
        sol = optimize(stats, w, pilot_budget(scheme, budget, w, pilot.n), scheme, pilot.n, seed)
        dN = sol.N - pilot.n
        row = {"round": rnd, "n_shared": pilot.n, "delta_n": dN, "cost": ledger.charged(),
               "projected_variance": sol.variance}
        info.trace.append(row)
        if sol.use_mc:
            # Plain Monte Carlo beats every allocation; more pilot points on
            # the approximations would be wasted.
            info.reason = "mc_fallback"
            return sol, stats, pilot, info
        if dN <= 0:
            info.reason = "converged"
            return sol, stats, pilot, info
        add = int(math.ceil(mode.gamma * dN))
        k = _affordable(w, scheme, ensemble.M, pilot_budget(scheme, budget, w, pilot.n + add), pilot.n, add)
        if k <= 0:
            info.reason = "budget"
            info.exhausted = True
            return sol, stats, pilot, info
        extra_pts = stream.points(pilot.n, pilot.n + k)
        vals = np.column_stack([evaluate(ensemble, i, betas[i], extra_pts, ledger, "pilot")
                                for i in range(ensemble.M + 1)])
        pilot = pilot.merge(PilotSample(vals, extra_pts, pilot.betas, pilot.seed, k * per_point))
        stats = estimate_stats(pilot)
        if k < add:
            info.reason = "budget"
            info.exhausted = True
            sol = optimize(stats, w, pilot_budget(scheme, budget, w, pilot.n), scheme, pilot.n, seed)
            return sol, stats, pilot, info
    info.reason = "max_rounds"
    sol = optimize(stats, w, pilot_budget(scheme, budget, w, pilot.n), scheme, pilot.n, seed)
    return sol, stats, pilot, info


def write_trace(path, rows):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def evaluate_allocation(ensemble, betas, sol, stats, pilot, stream, ledger, budget):
    """Run the models on the allocation, reusing pilot outputs, and assemble.

    If the optimizer fell back to plain Monte Carlo, whatever budget is left
    after the pilot buys additional high-fidelity samples.
    """
    if sol.use_mc:
        spent = ledger.charged()
        extra = int(math.floor(budget - spent + 1e-9))
        pts = stream.points(pilot.n, pilot.n + max(extra, 0))
        vals = evaluate(ensemble, 0, betas[0], pts, ledger, "allocation")
        q = mc_estimate(np.concatenate([pilot.values[:, 0], vals]))
        n = pilot.n + vals.size
        return EstimatorReport(q, np.zeros(ensemble.M), stats.varQ / n, ledger.summary(), None, betas,
                               {"use_mc": True, "N": n})
    profile = sol.profile()
    offsets = profile.group_offsets()
    outputs = {}
    for i in range(ensemble.M + 1):
        groups = profile.z if i == 0 else profile.eval_groups(i)
        outputs[i] = {}
        for g in sorted(groups):
            lo, hi = int(offsets[g]), int(offsets[g + 1])
            reuse = min(max(pilot.n - lo, 0), hi - lo)
            parts = []
            if reuse:
                parts.append(pilot.values[lo:lo + reuse, i])
            if lo + reuse < hi:
                pts = stream.points(lo + reuse, hi)
                parts.append(evaluate(ensemble, i, betas[i], pts, ledger, "allocation"))
            outputs[i][g] = np.concatenate(parts)
    mats = compute_fF(profile)
    rep = assemble_estimator(outputs, stats, SchemeMatrices(mats.f, mats.F), profile, betas, ledger=ledger)
    rep.extra.update({"use_mc": False, "N": profile.N})
    return rep
