"""Sample-set algebra for ACV estimators.

A profile partitions every drawn sample into disjoint groups.  The shared set
``z`` and, for each low-fidelity model, the two sets entering its difference
term are unions of groups, so every intersection cardinality is a sum of
group sizes.  Groups are laid out consecutively in the point stream, shared
group first, which lets pilot points double as the head of ``z``.

Count conventions for ``n_lf`` in ``build_profile``:

* ACV-MF, ACV-IS, MFMC, GMF: ``n_lf[i]`` is the size of model ``i``'s full
  evaluation set.
* MLMC: ``n_lf[i]`` is the number of new samples for level ``i`` (the second
  set); level ``i`` also re-evaluates the new samples of level ``i - 1``.
"""

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConstraintError

SCHEMES = ("MLMC", "MFMC", "ACV-IS", "ACV-MF", "GMF")


@dataclass(frozen=True)
class AllocationProfile:
    scheme: str
    N: int
    n_lf: tuple
    group_sizes: tuple
    z: frozenset
    z1: tuple
    z2: tuple
    tree: tuple = None

    @property
    def M(self):
        return len(self.z1)

    def size(self, groups):
        return sum(self.group_sizes[g] for g in groups)

    def eval_groups(self, i):
        """Groups on which low-fidelity model ``i`` (1-based) is evaluated."""
        return self.z1[i - 1] | self.z2[i - 1]

    def eval_counts(self):
        return np.array([self.size(self.eval_groups(i)) for i in range(1, self.M + 1)])

    def cost(self, w):
        """Equivalent high-fidelity cost of all evaluations."""
        return float(self.N + np.dot(self.eval_counts(), np.asarray(w, dtype=float)))

    def group_offsets(self):
        return np.concatenate([[0], np.cumsum(self.group_sizes)]).astype(int)

    def total_points(self):
        return int(sum(self.group_sizes))

    def to_dict(self):
        return {
            "scheme": self.scheme,
            "N": self.N,
            "n_lf": list(self.n_lf),
            "tree": list(self.tree) if self.tree is not None else None,
            "groups": list(self.group_sizes),
            "z": sorted(self.z),
            "z1": [sorted(s) for s in self.z1],
            "z2": [sorted(s) for s in self.z2],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["scheme"], int(d["N"]), tuple(d["n_lf"]), tuple(d["groups"]), frozenset(d["z"]),
                   tuple(frozenset(s) for s in d["z1"]), tuple(frozenset(s) for s in d["z2"]),
                   tuple(d["tree"]) if d.get("tree") is not None else None)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class SchemeMatrices:
    f: np.ndarray
    F: np.ndarray
    ratios: dict = None


def star_tree(M):
    return tuple([0] * M)


def chain_tree(M):
    return tuple(range(M))


def check_tree(parents):
    M = len(parents)
    for i in range(1, M + 1):
        seen = set()
        node = i
        while node != 0:
            if node in seen or not 0 <= parents[node - 1] <= M:
                raise ConstraintError(f"parent map {parents} is not a tree rooted at 0")
            seen.add(node)
            node = parents[node - 1]


def _nested_profile(scheme, N, n_lf, parents):
    """Prefix layout: each set is the first ``n`` samples of one stream."""
    M = len(n_lf)
    check_tree(parents)
    sizes = [N] + list(n_lf)
    for i in range(1, M + 1):
        p = parents[i - 1]
        if not sizes[i] > sizes[p]:
            who = "z" if p == 0 else f"z_{p}"
            raise ConstraintError(
                f"{scheme}: model {i} needs more samples than {who} ({sizes[i]} <= {sizes[p]}); "
                f"otherwise z_{i} minus z_{i}^1 is empty")
    levels = sorted(set(sizes))
    group_sizes = [levels[0]] + [b - a for a, b in zip(levels[:-1], levels[1:])]

    def prefix(n):
        return frozenset(range(levels.index(n) + 1))

    z = prefix(N)
    z1 = tuple(prefix(sizes[parents[i - 1]]) for i in range(1, M + 1))
    z2 = tuple(prefix(sizes[i]) for i in range(1, M + 1))
    return AllocationProfile(scheme, N, tuple(n_lf), tuple(group_sizes), z, z1, z2,
                             tuple(parents) if scheme == "GMF" else None)


def build_profile(scheme, N, n_lf, tree=None):
    """Group decomposition realising the set relations of ``scheme``."""
    N = int(N)
    n_lf = tuple(int(n) for n in n_lf)
    M = len(n_lf)
    if M < 1:
        raise ConstraintError("at least one low-fidelity model is required")
    if N < 1:
        raise ConstraintError("N must be at least 1")
    if scheme == "ACV-MF":
        return _nested_profile(scheme, N, n_lf, star_tree(M))
    if scheme == "MFMC":
        return _nested_profile(scheme, N, n_lf, chain_tree(M))
    if scheme == "GMF":
        if tree is None or len(tree) != M:
            raise ConstraintError("GMF needs a parent map with one entry per low-fidelity model")
        return _nested_profile(scheme, N, n_lf, tuple(int(p) for p in tree))
    if scheme == "ACV-IS":
        for i, n in enumerate(n_lf, 1):
            if not n > N:
                raise ConstraintError(f"ACV-IS: model {i} needs N_i > N so z_{i} minus z is nonempty")
        group_sizes = (N,) + tuple(n - N for n in n_lf)
        z = frozenset([0])
        return AllocationProfile(scheme, N, n_lf, group_sizes, z, tuple(z for _ in n_lf),
                                 tuple(frozenset([i]) for i in range(1, M + 1)))
    if scheme == "MLMC":
        for i, n in enumerate(n_lf, 1):
            if n < 1:
                raise ConstraintError(f"MLMC: level {i} needs at least one new sample")
        group_sizes = (N,) + n_lf
        z1 = (frozenset([0]),) + tuple(frozenset([i]) for i in range(1, M))
        z2 = tuple(frozenset([i]) for i in range(1, M + 1))
        return AllocationProfile(scheme, N, n_lf, group_sizes, frozenset([0]), z1, z2)
    raise ConstraintError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")


def compute_fF(profile, exact=False):
    """The f vector and F matrix of the profile from exact group counts.

    With ``exact`` the entries are returned as ``Fraction`` object arrays.
    """
    p = profile
    N = Fraction(p.N)
    n = {}

    def card(a, b=None):
        key = (a, b)
        if key not in n:
            n[key] = Fraction(p.size(a if b is None else a & b))
        return n[key]

    M = p.M
    f = []
    F = [[Fraction(0)] * M for _ in range(M)]
    for i in range(M):
        a1, a2 = p.z1[i], p.z2[i]
        f.append(card(a1, p.z) / card(a1) - card(a2, p.z) / card(a2))
        for j in range(i, M):
            b1, b2 = p.z1[j], p.z2[j]
            v = (card(a1, b1) / (card(a1) * card(b1)) - card(a1, b2) / (card(a1) * card(b2))
                 - card(a2, b1) / (card(a2) * card(b1)) + card(a2, b2) / (card(a2) * card(b2)))
            F[i][j] = F[j][i] = N * v
    ratios = {"z": Fraction(1)}
    for i in range(M):
        ratios[f"z{i + 1}^1"] = card(p.z1[i]) / N
        ratios[f"z{i + 1}^2"] = card(p.z2[i]) / N
    if exact:
        return SchemeMatrices(np.array(f, dtype=object), np.array(F, dtype=object), ratios)
    return SchemeMatrices(np.array([float(x) for x in f]), np.array([[float(x) for x in row] for row in F]),
                          {k: float(v) for k, v in ratios.items()})


# ---------------------------------------------------------------------------
# Closed forms on continuous cardinalities, used inside the optimizer.


def nested_fF(N, n_lf, parents):
    """f, F for prefix layouts given real-valued set sizes."""
    n = np.concatenate([[N], np.asarray(n_lf, dtype=float)])
    p = np.asarray(parents, dtype=int)
    i = np.arange(1, n.size)
    npar = n[p]
    ni = n[i]
    f = N / npar - N / ni
    inv = lambda a, b: 1.0 / np.maximum.outer(a, b)
    F = N * (inv(npar, npar) - inv(npar, ni) - inv(ni, npar) + inv(ni, ni))
    return f, F


def acvis_fF(N, n_lf):
    e = np.asarray(n_lf, dtype=float) - N
    M = e.size
    return np.ones(M), np.ones((M, M)) + np.diag(N / e)


def mlmc_fF(N, n_new):
    e = np.asarray(n_new, dtype=float)
    M = e.size
    first = np.concatenate([[N], e[:-1]])
    f = np.zeros(M)
    f[0] = 1.0
    F = np.diag(N / first + N / e)
    for i in range(M - 1):
        F[i, i + 1] = F[i + 1, i] = -N / e[i]
    return f, F


def scheme_fF(scheme, N, n_lf, tree=None):
    """Fast float f, F for any scheme with possibly non-integer sizes."""
    M = len(n_lf)
    if scheme == "ACV-MF":
        return nested_fF(N, n_lf, star_tree(M))
    if scheme == "MFMC":
        return nested_fF(N, n_lf, chain_tree(M))
    if scheme == "GMF":
        return nested_fF(N, n_lf, tree)
    if scheme == "ACV-IS":
        return acvis_fF(N, n_lf)
    if scheme == "MLMC":
        return mlmc_fF(N, n_lf)
    raise ConstraintError(f"unknown scheme {scheme!r}")


def eval_counts(scheme, N, n_lf):
    """Per-model evaluation counts implied by the ``n_lf`` convention."""
    n = np.asarray(n_lf, dtype=float)
    if scheme == "MLMC":
        prev = np.concatenate([[N], n[:-1]])
        return prev + n
    return n
