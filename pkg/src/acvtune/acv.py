"""ACV estimator mathematics: weights, predicted variance and assembly."""

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AssemblyError, NumericalConsistencyError, SingularityError

log = logging.getLogger(__name__)

COND_LIMIT = 1e12
JITTER = 1e-10
CLIP_REL = 1e-12


@dataclass
class EstimatorReport:
    qtilde: float
    alpha: np.ndarray
    predicted_variance: float
    ledger: dict
    profile: object = None
    betas: list = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "qtilde": self.qtilde,
            "alpha": np.asarray(self.alpha).tolist(),
            "predicted_variance": self.predicted_variance,
            "ledger": self.ledger,
            "profile": self.profile.to_dict() if self.profile is not None else None,
            "betas": [np.asarray(b).tolist() for b in self.betas] if self.betas is not None else None,
            "extra": self.extra,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def mc_estimate(values):
    """Plain Monte Carlo mean with order-independent exact summation."""
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size == 0:
        raise ValueError("cannot average an empty sample")
    return math.fsum(values) / values.size


def solve_cv_system(A, b, quiet=False):
    """Solve the symmetric system ``A x = b`` by Cholesky with ridge jitter.

    Jitter is added when the condition number exceeds 1e12 or the
    factorisation fails; a second failure is a singularity error.
    """
    A = 0.5 * (A + A.T)
    if not np.all(np.isfinite(A)):
        raise SingularityError("control-variate matrix has non-finite entries")
    jittered = False
    if np.linalg.cond(A) > COND_LIMIT:
        A = A + JITTER * np.eye(A.shape[0])
        jittered = True
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        if jittered:
            raise SingularityError("control-variate matrix is not positive definite") from None
        A = A + JITTER * np.eye(A.shape[0])
        jittered = True
        try:
            L = np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            raise SingularityError("control-variate matrix is not positive definite") from None
    if jittered and not quiet:
        log.info("added ridge jitter %.0e to an ill-conditioned control-variate system", JITTER)
    y = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, y)


def variance_factor(rho, P, f, F, quiet=False):
    """Return ``1 - b^T A^-1 b`` and ``A^-1 b`` for ``A = F*P``, ``b = f*rho``."""
    b = np.asarray(f) * np.asarray(rho)
    x = solve_cv_system(np.asarray(F) * np.asarray(P), b, quiet=quiet)
    return 1.0 - float(b @ x), x


def predicted_variance(stats, matrices, N, quiet=False):
    """Estimator variance at optimal weights, and those weights."""
    if N < 1:
        raise ValueError("N must be at least 1")
    fac, x = variance_factor(stats.rho, stats.P, matrices.f, matrices.F, quiet=quiet)
    var = stats.varQ / N * fac
    if var < 0.0:
        if var < -CLIP_REL * stats.varQ / N:
            raise NumericalConsistencyError(f"predicted variance {var:.3e} is negative beyond round-off")
        if not quiet:
            log.info("clipped round-off negative variance %.3e to zero", var)
        var = 0.0
    alpha = -x / stats.sigma * math.sqrt(stats.varQ)
    return var, alpha


def _set_mean(group_outputs, groups, model_id):
    parts = []
    for g in sorted(groups):
        try:
            parts.append(np.asarray(group_outputs[g], dtype=float).reshape(-1))
        except KeyError:
            raise AssemblyError(f"missing outputs of model {model_id} on group {g}") from None
    vals = np.concatenate(parts)
    return math.fsum(vals) / vals.size


def assemble_estimator(outputs, stats, matrices, profile, betas=None, alpha=None, ledger=None,
                       classical_mlmc=False):
    """Combine model outputs on the profile's groups into the ACV estimate.

    ``outputs[i][g]`` holds model ``i``'s values on group ``g``.  Weights
    default to the optimal ones for ``stats``; ``classical_mlmc`` fixes them
    at -1 as in the telescoping multilevel estimator.
    """
    N = profile.N
    var, a_opt = predicted_variance(stats, matrices, N)
    if classical_mlmc:
        alpha = -np.ones(profile.M)
    elif alpha is None:
        alpha = a_opt
    alpha = np.asarray(alpha, dtype=float)
    if 0 not in outputs:
        raise AssemblyError("missing high-fidelity outputs")
    q = _set_mean(outputs[0], profile.z, 0)
    terms = [q]
    for i in range(1, profile.M + 1):
        if i not in outputs:
            raise AssemblyError(f"missing outputs of model {i}")
        d = _set_mean(outputs[i], profile.z1[i - 1], i) - _set_mean(outputs[i], profile.z2[i - 1], i)
        terms.append(alpha[i - 1] * d)
    qt = math.fsum(terms)
    if classical_mlmc or alpha is not a_opt:
        var = weighted_variance(stats, matrices, N, alpha)
    summary = ledger.summary() if ledger is not None else {}
    return EstimatorReport(qt, alpha, var, summary, profile, betas)


def weighted_variance(stats, matrices, N, alpha):
    """Estimator variance for arbitrary weights (quadratic form in alpha)."""
    s = stats.sigma
    alpha = np.asarray(alpha, dtype=float)
    G = matrices.F * stats.P * np.outer(s, s)
    g = matrices.f * s * stats.rho * math.sqrt(stats.varQ)
    return float((stats.varQ + alpha @ G @ alpha + 2.0 * alpha @ g) / N)
