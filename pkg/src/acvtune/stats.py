"""Pilot sampling and the second-moment statistics the variance formula needs."""

import json
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateStatsError
from .models import evaluate
from .seeding import STREAM_POINTS, PointStream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelStats:
    """Var[Q], low-fidelity standard deviations, correlations with Q, and P."""

    varQ: float
    sigma: np.ndarray
    rho: np.ndarray
    P: np.ndarray

    @property
    def M(self):
        return self.sigma.size

    @classmethod
    def from_covariance(cls, C):
        C = np.asarray(C, dtype=float)
        s = np.sqrt(np.diag(C))
        R = C / np.outer(s, s)
        R = 0.5 * (R + R.T)
        np.fill_diagonal(R, 1.0)
        R = np.clip(R, -1.0, 1.0)
        return cls(float(C[0, 0]), s[1:].copy(), R[0, 1:].copy(), R[1:, 1:].copy())

    def covariance(self):
        s = np.concatenate([[np.sqrt(self.varQ)], self.sigma])
        R = np.eye(self.M + 1)
        R[0, 1:] = R[1:, 0] = self.rho
        R[1:, 1:] = self.P
        return R * np.outer(s, s)

    def permuted(self, perm):
        """Statistics with the low-fidelity models relabelled by ``perm``."""
        perm = np.asarray(perm)
        return ModelStats(self.varQ, self.sigma[perm], self.rho[perm], self.P[np.ix_(perm, perm)])

    def to_dict(self):
        return {"varQ": self.varQ, "sigma": self.sigma.tolist(), "rho": self.rho.tolist(), "P": self.P.tolist()}


@dataclass
class PilotSample:
    """Outputs of every model on one shared set of pilot points."""

    values: np.ndarray
    points: np.ndarray
    betas: list
    seed: int = None
    cost: float = 0.0

    @property
    def n(self):
        return self.values.shape[0]

    def merge(self, other):
        """Pilot on the union of both point sets (rows of ``self`` first)."""
        return PilotSample(np.vstack([self.values, other.values]), np.vstack([self.points, other.points]),
                           self.betas, self.seed, self.cost + other.cost)

    def with_columns(self, model_ids, columns, betas, cost=0.0):
        """Copy with some model columns replaced, e.g. after a change of beta."""
        values = self.values.copy()
        for i, col in zip(model_ids, columns):
            values[:, i] = col
        return PilotSample(values, self.points, betas, self.seed, self.cost + cost)


def evaluate_all(ensemble, betas, points, ledger=None, category="pilot", model_ids=None):
    """Matrix of outputs, one column per model in ``model_ids`` (default all)."""
    ids = range(ensemble.M + 1) if model_ids is None else model_ids
    return np.column_stack([evaluate(ensemble, i, betas[i], points, ledger, category) for i in ids])


def draw_pilot(ensemble, betas, n_pilot, seed, ledger=None, category="pilot", stream=None, start=0):
    """Evaluate every model on ``n_pilot`` points of the trial's point stream.

    With ``stream`` omitted a fresh stream for ``seed`` is used, so the same
    seed always yields the same pilot.
    """
    if n_pilot < 2:
        raise ValueError("a pilot needs at least two samples")
    if n_pilot < 10:
        warnings.warn(f"pilot of {n_pilot} samples gives very noisy statistics", stacklevel=2)
    stream = stream or PointStream(ensemble.inputs, seed, STREAM_POINTS)
    pts = stream.points(start, start + n_pilot)
    vals = evaluate_all(ensemble, betas, pts, ledger, category)
    cost = n_pilot * (1.0 + float(np.sum(ensemble.costs(betas))))
    return PilotSample(vals, pts, [np.asarray(b, dtype=float) for b in betas], seed, cost)


def estimate_stats(pilot):
    """Sample statistics with divisor n - 1 and Pearson correlations."""
    Y = pilot.values if isinstance(pilot, PilotSample) else np.asarray(pilot, dtype=float)
    if Y.shape[0] < 2:
        raise DegenerateStatsError("need at least two pilot samples")
    C = np.cov(Y, rowvar=False, ddof=1)
    C = np.atleast_2d(C)
    var = np.diag(C)
    # Relative tolerance so a column of identical values is caught despite round-off.
    scale = np.maximum(np.mean(Y * Y, axis=0), np.finfo(float).tiny)
    for i in range(var.size):
        if not var[i] > 1e-14 * scale[i]:
            raise DegenerateStatsError(f"model {i} has zero variance on the pilot", model_id=i)
    return ModelStats.from_covariance(C)


def save_pilot_csv(path, pilot, model_ids=None):
    """Write a pilot as CSV with a commented header carrying beta and seed."""
    n_in = pilot.points.shape[1]
    n_out = pilot.values.shape[1]
    ids = list(model_ids or range(n_out))
    header = [f"# seed={json.dumps(pilot.seed)}",
              f"# betas={json.dumps([np.asarray(b).tolist() for b in pilot.betas])}",
              f"# cost={pilot.cost!r}",
              ",".join([f"z{k}" for k in range(n_in)] + [f"q{i}" for i in ids])]
    data = np.hstack([pilot.points, pilot.values])
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        for row in data:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def load_pilot_csv(path):
    meta = {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, val = line[2:].partition("=")
            meta[key] = json.loads(val)
        else:
            body.append(line)
    cols = body[0].split(",")
    n_in = sum(c.startswith("z") for c in cols)
    data = np.array([[float(x) for x in line.split(",")] for line in body[1:]]).reshape(-1, len(cols))
    return PilotSample(data[:, n_in:], data[:, :n_in], [np.asarray(b) for b in meta["betas"]],
                       meta.get("seed"), float(meta.get("cost", 0.0)))
