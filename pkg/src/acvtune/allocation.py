"""Budget-constrained sample allocation, including the recursion-tree search.

The continuous problem is posed on the spending fractions only: the
high-fidelity count follows from spending the whole budget, so the search
space is ``M``-dimensional and always on the budget boundary.  Each scheme
has an unconstrained parameterization:

* prefix layouts (ACV-MF, MFMC, GMF): ``r_i = r_parent * (1 + exp(x_i))``
  with ``r`` the size ratio to ``N``, which keeps every set strictly larger
  than its parent;
* ACV-IS: ``r_i = 1 + exp(x_i)``;
* MLMC: new samples per level ``N * exp(x_i)``.

Lower bounds on ``N`` and on evaluation counts (2, or the pilot size in
projection mode) enter as a steep log penalty.  The relaxed optimum is found
by Nelder-Mead from structured starts, then floored, repaired and greedily
topped up with integer samples.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.optimize import minimize

from .errors import InfeasibleBudgetError
from .sampleset import build_profile, chain_tree, eval_counts, star_tree
from .seeding import rng_for

log = logging.getLogger(__name__)

PENALTY = 1e3
MAX_ITER = 2000
N_STARTS = 8
CODE_NESTED, CODE_IS, CODE_MLMC = 0, 1, 2


@dataclass
class RecursionTree:
    parents: tuple

    @property
    def M(self):
        return len(self.parents)

    def is_star(self):
        return all(p == 0 for p in self.parents)

    def __str__(self):
        return "-".join(str(p) for p in self.parents)


@dataclass
class AllocationSolution:
    scheme: str
    N: int
    n_lf: tuple
    variance: float
    cost: float
    budget: float
    tree: tuple = None
    use_mc: bool = False
    converged: bool = True
    relaxed: dict = field(default_factory=dict)

    def profile(self):
        if self.use_mc:
            return None
        return build_profile(self.scheme, self.N, self.n_lf, self.tree)

    def eval_counts(self):
        if self.use_mc:
            return np.zeros(len(self.n_lf), dtype=int)
        return eval_counts(self.scheme, self.N, self.n_lf).astype(int)

    def to_dict(self):
        return {
            "scheme": self.scheme,
            "tree": list(self.tree) if self.tree is not None else None,
            "N": self.N,
            "n_lf": list(self.n_lf),
            "eval_counts": self.eval_counts().tolist(),
            "variance": self.variance,
            "cost": self.cost,
            "budget": self.budget,
            "use_mc": self.use_mc,
            "converged": self.converged,
            "relaxed": self.relaxed,
        }


def _scheme_code(scheme):
    if scheme in ("ACV-MF", "MFMC", "GMF"):
        return CODE_NESTED
    if scheme == "ACV-IS":
        return CODE_IS
    if scheme == "MLMC":
        return CODE_MLMC
    raise ValueError(f"unknown scheme {scheme!r}")


def _parents_for(scheme, M, tree):
    if scheme == "ACV-MF":
        return star_tree(M)
    if scheme == "MFMC":
        return chain_tree(M)
    if scheme == "GMF":
        return tuple(tree)
    return star_tree(M)


def _topological(parents):
    order, placed = [], {0}
    while len(order) < len(parents):
        for i, p in enumerate(parents, 1):
            if i not in placed and p in placed:
                order.append(i)
                placed.add(i)
    return np.array(order, dtype=np.int64)


@numba.njit(cache=True)
def _decode(x, code, parents, order, w, budget):
    """Per-model evaluation ratios, ``n_lf`` ratios and the resulting ``N``."""
    M = x.size
    ev = np.empty(M)
    nl = np.empty(M)
    # Clamp so exp neither overflows nor underflows to an exact 0.
    x = np.minimum(np.maximum(x, -30.0), 40.0)
    if code == 0:
        r = np.ones(M + 1)
        for k in range(M):
            i = order[k]
            r[i] = r[parents[i - 1]] * (1.0 + math.exp(x[i - 1]))
        for i in range(M):
            ev[i] = r[i + 1]
            nl[i] = r[i + 1]
    elif code == 1:
        for i in range(M):
            ev[i] = 1.0 + math.exp(x[i])
            nl[i] = ev[i]
    else:
        prev = 1.0
        for i in range(M):
            s = math.exp(x[i])
            nl[i] = s
            ev[i] = prev + s
            prev = s
    tot = 1.0
    for i in range(M):
        tot += w[i] * ev[i]
    return ev, nl, budget / tot


@numba.njit(cache=True)
def _fF_ratios(code, parents, nl):
    """f and F in terms of size ratios to ``N``."""
    M = nl.size
    f = np.zeros(M)
    F = np.zeros((M, M))
    if code == 0:
        r = np.ones(M + 1)
        for i in range(M):
            r[i + 1] = nl[i]
        for i in range(M):
            pi = r[parents[i]]
            ri = r[i + 1]
            f[i] = 1.0 / pi - 1.0 / ri
            for j in range(M):
                pj = r[parents[j]]
                rj = r[j + 1]
                F[i, j] = (1.0 / max(pi, pj) - 1.0 / max(pi, rj) - 1.0 / max(ri, pj) + 1.0 / max(ri, rj))
    elif code == 1:
        for i in range(M):
            f[i] = 1.0
            for j in range(M):
                F[i, j] = 1.0
            F[i, i] += 1.0 / (nl[i] - 1.0)
    else:
        f[0] = 1.0
        for i in range(M):
            first = 1.0 if i == 0 else nl[i - 1]
            F[i, i] = 1.0 / first + 1.0 / nl[i]
            if i + 1 < M:
                F[i, i + 1] = -1.0 / nl[i]
                F[i + 1, i] = -1.0 / nl[i]
    return f, F


@numba.njit(cache=True)
def _chol_quad(A, b):
    """``b^T A^-1 b`` via an in-place Cholesky; NaN when not positive definite."""
    n = b.size
    L = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 0.0:
                    return np.nan
                L[i, i] = math.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    y = np.empty(n)
    q = 0.0
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
        q += y[i] * y[i]
    return q


@numba.njit(cache=True)
def _factor(code, parents, nl, rho, P):
    f, F = _fF_ratios(code, parents, nl)
    M = nl.size
    A = F * P
    b = f * rho
    q = _chol_quad(A, b)
    if math.isnan(q):
        for i in range(M):
            A[i, i] += 1e-10
        q = _chol_quad(A, b)
    return 1.0 - q


@numba.njit(cache=True)
def _objective(x, code, parents, order, w, budget, rho, P, lb_n, lb_ev):
    ev, nl, N = _decode(x, code, parents, order, w, budget)
    pen = 0.0
    if N < lb_n:
        pen += PENALTY * math.log(lb_n / N)
    for i in range(ev.size):
        if ev[i] * N < lb_ev:
            pen += PENALTY * math.log(lb_ev / (ev[i] * N))
    fac = _factor(code, parents, nl, rho, P)
    if math.isnan(fac):
        return 1e6 + pen
    return math.log(max(fac, 1e-18)) - math.log(N) + pen


def _starts(code, M, w, rho, seed):
    w = np.asarray(w, dtype=float)
    starts = [np.full(M, -4.0), np.zeros(M)]
    rho2 = np.minimum(rho * rho, 1.0 - 1e-12)
    # Control-variate rule of thumb: ratio ~ sqrt(rho^2 / ((1 - rho^2) w)).
    ratio = np.sqrt(rho2 / ((1.0 - rho2) * w)) + 1.0
    guess = np.log(np.maximum(ratio - 1.0, 1e-3))
    starts.append(np.clip(guess, -6, 12))
    for k in range(M):
        x = np.full(M, -3.0)
        x[k] = math.log(max(1.0 / w[k] - 1.0, 1e-3))
        starts.append(np.clip(x, -6, 12))
    rng = rng_for(seed, 11)
    while len(starts) < N_STARTS:
        starts.append(np.clip(guess + rng.normal(0.0, 1.5, M), -6, 12))
    return starts[:N_STARTS]


def _relaxed(stats, w, budget, scheme, tree, lb, seed):
    M = stats.M
    code = _scheme_code(scheme)
    parents = np.array(_parents_for(scheme, M, tree), dtype=np.int64)
    order = _topological(tuple(parents)) if code == CODE_NESTED else np.arange(1, M + 1, dtype=np.int64)
    args = (code, parents, order, np.asarray(w, float), float(budget), np.asarray(stats.rho, float),
            np.ascontiguousarray(stats.P, dtype=float), float(lb), float(lb))
    fun = lambda x: _objective(x, *args)
    best = None
    for x0 in _starts(code, M, w, np.asarray(stats.rho, float), seed):
        res = minimize(fun, x0, method="Nelder-Mead",
                       options={"maxiter": MAX_ITER, "xatol": 1e-6, "fatol": 1e-9, "adaptive": M > 2})
        if best is None or res.fun < best.fun:
            best = res
    ev, nl, N = _decode(best.x, code, parents, order, np.asarray(w, float), float(budget))
    fac = _factor(code, parents, nl, np.asarray(stats.rho, float), np.ascontiguousarray(stats.P, dtype=float))
    return {
        "N": float(N),
        "n_lf": (nl * N).tolist(),
        "variance": float(stats.varQ * max(fac, 0.0) / N),
        "objective": float(best.fun),
        "x": best.x.tolist(),
    }, bool(best.success)


class _IntegerProblem:
    """Integer allocation vector ``(N, n_lf...)`` with feasibility repair."""

    def __init__(self, stats, w, budget, scheme, tree, lb):
        self.stats = stats
        self.w = np.asarray(w, dtype=float)
        self.budget = float(budget)
        self.scheme = scheme
        self.M = stats.M
        self.parents = _parents_for(scheme, self.M, tree)
        self.order = _topological(self.parents) if _scheme_code(scheme) == CODE_NESTED else None
        self.tree = tree
        self.lb = int(lb)
        self.code = _scheme_code(scheme)
        self.parent_arr = np.array(self.parents, dtype=np.int64)
        if hasattr(stats, "rho"):
            self.rho = np.asarray(stats.rho, dtype=float)
            self.P = np.ascontiguousarray(stats.P, dtype=float)

    def fix(self, v):
        """Smallest raise of ``v`` that satisfies the scheme relations."""
        v = np.array(v, dtype=np.int64)
        v[0] = max(v[0], self.lb)
        if self.scheme in ("ACV-MF", "MFMC", "GMF"):
            for i in self.order:
                v[i] = max(v[i], v[self.parents[i - 1]] + 1, self.lb)
        elif self.scheme == "ACV-IS":
            v[1:] = np.maximum(v[1:], max(v[0] + 1, self.lb))
        else:
            for i in range(1, self.M + 1):
                prev = v[i - 1]
                v[i] = max(v[i], 1, self.lb - prev)
        return v

    def cost(self, v):
        return float(v[0] + self.w @ eval_counts(self.scheme, v[0], v[1:]))

    def variance(self, v):
        N = float(v[0])
        fac = _factor(self.code, self.parent_arr, v[1:].astype(float) / N, self.rho, self.P)
        if math.isnan(fac):
            return math.inf
        return self.stats.varQ * max(fac, 0.0) / N

    def unit_cost(self, k):
        if k == 0:
            return 1.0
        if self.scheme == "MLMC" and k < self.M:
            return self.w[k - 1] + self.w[k]
        return self.w[k - 1]

    def repair_down(self, v):
        """Shrink ``v`` until affordable, losing as little variance per cost saved as possible.

        Each coordinate proposes the single cut that clears the overspend
        (halved until feasible) so repair takes a handful of rounds.
        """
        var = self.variance(v)
        while self.cost(v) > self.budget + 1e-9:
            over = self.cost(v) - self.budget
            best = None
            for k in range(self.M + 1):
                step = max(1, int(math.ceil(over / self.unit_cost(k))))
                while True:
                    u = v.copy()
                    u[k] -= step
                    if u[k] >= 0 and np.array_equal(self.fix(u), u):
                        break
                    if step == 1:
                        u = None
                        break
                    step = max(1, step // 2)
                if u is None:
                    continue
                saved = self.cost(v) - self.cost(u)
                if saved <= 0:
                    continue
                score = (self.variance(u) - var) / saved
                if best is None or score < best[0]:
                    best = (score, u)
            if best is None:
                return None
            v = best[1]
            var = self.variance(v)
        return v

    def grow(self, v):
        """Greedy top-up by best variance decrease per unit cost.

        Each coordinate proposes one geometric step (half of what the
        remaining budget could buy, at least one sample) so the number of
        rounds grows only logarithmically with the budget.
        """
        var = self.variance(v)
        cost = self.cost(v)
        while True:
            remaining = self.budget - cost
            best = None
            for k in range(self.M + 1):
                step = max(1, int(0.5 * remaining / self.unit_cost(k)))
                while True:
                    u = v.copy()
                    u[k] += step
                    u = self.fix(u)
                    c = self.cost(u)
                    if c <= self.budget + 1e-9 or step == 1:
                        break
                    step = max(1, step // 2)
                if c > self.budget + 1e-9 or c <= cost:
                    continue
                dv = var - self.variance(u)
                if dv <= 0:
                    continue
                score = dv / (c - cost)
                if best is None or score > best[0]:
                    best = (score, u, c)
            if best is None:
                return v
            _, v, cost = best
            var = self.variance(v)


def minimum_cost(w, scheme, M, tree=None, lb=2):
    prob = _IntegerProblem(_DummyStats(M), w, math.inf, scheme, tree, lb)
    return prob.cost(prob.fix(np.zeros(M + 1, dtype=np.int64)))


class _DummyStats:
    def __init__(self, M):
        self.M = M


def optimize_allocation(stats, costs, budget, scheme="ACV-MF", tree=None, n_min=2, seed=0):
    """Optimal integer allocation of ``budget`` for ``scheme``.

    ``n_min`` is the lower bound on ``N`` and on every evaluation count; pilot
    projection passes the pilot size here.
    """
    w = np.asarray(costs, dtype=float)
    M = stats.M
    if w.size != M or np.any(w <= 0):
        raise ValueError("need one positive cost per low-fidelity model")
    lb = max(2, int(n_min))
    prob = _IntegerProblem(stats, w, budget, scheme, tree, lb)
    floor_cost = prob.cost(prob.fix(np.zeros(M + 1, dtype=np.int64)))
    if floor_cost > budget + 1e-9:
        raise InfeasibleBudgetError(
            f"budget {budget} is below the minimal {scheme} allocation cost {floor_cost:.6g}")
    relaxed, converged = _relaxed(stats, w, budget, scheme, tree, lb, seed)
    if not converged:
        log.info("allocation optimizer did not converge for %s; using best iterate", scheme)
    v0 = np.floor(np.concatenate([[relaxed["N"]], relaxed["n_lf"]])).astype(np.int64)
    v = prob.repair_down(prob.fix(v0))
    if v is None:
        v = prob.fix(np.zeros(M + 1, dtype=np.int64))
    v = prob.grow(v)
    var = prob.variance(v)
    sol = AllocationSolution(scheme, int(v[0]), tuple(int(n) for n in v[1:]), float(var), prob.cost(v),
                             float(budget), tuple(tree) if tree is not None else None, False, converged,
                             relaxed)
    n_mc = int(math.floor(budget + 1e-9))
    var_mc = stats.varQ / n_mc
    if not var <= var_mc:
        sol = AllocationSolution(scheme, n_mc, tuple(int(n) for n in v[1:]), float(var_mc), float(n_mc),
                                 float(budget), sol.tree, True, converged, relaxed)
    return sol


def enumerate_trees(M):
    """Every parent map on models ``1..M`` forming a tree rooted at 0."""
    if not 1 <= M <= 6:
        raise ValueError("tree enumeration supports 1 <= M <= 6")
    trees = []
    for parents in itertools.product(range(M + 1), repeat=M):
        if any(p == i for i, p in enumerate(parents, 1)):
            continue
        ok = True
        for i in range(1, M + 1):
            node, steps = i, 0
            while node != 0 and steps <= M:
                node = parents[node - 1]
                steps += 1
            if node != 0:
                ok = False
                break
        if ok:
            trees.append(RecursionTree(tuple(parents)))
    return trees


def optimize_allocation_gmf(stats, costs, budget, n_min=2, seed=0, trees=None):
    """Best allocation over all recursion trees (the star tree is ACV-MF)."""
    best = None
    for tree in trees or enumerate_trees(stats.M):
        scheme = "ACV-MF" if tree.is_star() else "GMF"
        sol = optimize_allocation(stats, costs, budget, scheme, None if tree.is_star() else tree.parents,
                                  n_min, seed)
        if best is None or sol.variance < best.variance:
            best = sol
    return best


def optimize(stats, costs, budget, scheme, n_min=2, seed=0):
    """Dispatch on scheme name, with ``GMF`` meaning the full tree search."""
    if scheme == "GMF":
        return optimize_allocation_gmf(stats, costs, budget, n_min, seed)
    return optimize_allocation(stats, costs, budget, scheme, None, n_min, seed)
