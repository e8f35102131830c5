"""Model ensembles: one high-fidelity model plus tunable or fixed approximations.

Hyperparameters are carried as a list ``betas`` with one 1-D array per model
(index 0 is the high-fidelity model and always has an empty array).  The
tuning loop works on a flat vector that concatenates the hyperparameters of
the tunable models only; ``ModelEnsemble.expand_beta`` maps it back.
"""

import copy
import hashlib
import json
import math
import threading
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable

import numba
import numpy as np
from scipy.special import ndtri

from . import trajectory
from .errors import ConfigError, DomainError, EvaluationError
from .seeding import rng_for

COST_CATEGORIES = ("pilot", "tuning", "allocation", "offline")


@dataclass(frozen=True)
class Marginal:
    dist: str
    a: float
    b: float
    name: str = ""

    def __post_init__(self):
        if self.dist == "uniform":
            if not self.a < self.b:
                raise ConfigError(f"uniform marginal {self.name!r} needs low < high")
        elif self.dist == "normal":
            if not self.b > 0:
                raise ConfigError(f"normal marginal {self.name!r} needs sigma > 0")
        else:
            raise ConfigError(f"unknown distribution {self.dist!r}")

    def from_unit(self, u):
        if self.dist == "uniform":
            return self.a + (self.b - self.a) * u
        return self.a + self.b * ndtri(u)


@dataclass(frozen=True)
class InputSpec:
    marginals: tuple

    def __post_init__(self):
        if len(self.marginals) < 1:
            raise ConfigError("input dimension must be at least 1")

    @property
    def dimension(self):
        return len(self.marginals)

    @classmethod
    def from_config(cls, entries):
        out = []
        for e in entries:
            if e["dist"] == "uniform":
                out.append(Marginal("uniform", float(e["low"]), float(e["high"]), e.get("name", "")))
            else:
                out.append(Marginal(e["dist"], float(e.get("mean", 0.0)), float(e.get("std", 0.0)), e.get("name", "")))
        return cls(tuple(out))

    def from_unit(self, u):
        """Map points of the open unit cube to the input distribution."""
        u = np.atleast_2d(u)
        return np.column_stack([m.from_unit(u[:, k]) for k, m in enumerate(self.marginals)])

    def sample(self, rng, n):
        return self.from_unit(rng.random((n, self.dimension)))


@dataclass
class ModelSpec:
    model_id: int
    name: str
    func: Callable
    cost_fn: Callable
    bounds: tuple = ()
    default_beta: tuple = ()
    tunable: bool = False
    log_scale: bool = True

    @property
    def n_beta(self):
        return len(self.bounds)

    def check_beta(self, beta):
        beta = np.asarray(beta, dtype=float).reshape(-1)
        if beta.size != self.n_beta:
            raise DomainError(f"model {self.model_id} expects {self.n_beta} hyperparameters, got {beta.size}")
        for k, (lo, hi) in enumerate(self.bounds):
            # Relative slack absorbs round-off from log/exp coordinate maps.
            tol = 1e-12 * max(abs(lo), abs(hi))
            if not (lo - tol <= beta[k] <= hi + tol) or not math.isfinite(beta[k]):
                raise DomainError(f"model {self.model_id} hyperparameter {beta[k]!r} outside [{lo}, {hi}]")
        return np.clip(beta, [b[0] for b in self.bounds], [b[1] for b in self.bounds]) if self.n_beta else beta

    def cost(self, beta):
        return float(self.cost_fn(self.check_beta(beta)))


@dataclass
class ModelEnsemble:
    name: str
    inputs: InputSpec
    models: list
    qoi: str = "mean"
    hand_beta: list = None
    config: dict = field(default_factory=dict)
    exact_stats: object = None
    exact_mean: float = None

    def __post_init__(self):
        if len(self.models) < 2:
            raise ConfigError("an ensemble needs a high-fidelity model and at least one approximation")
        if self.models[0].n_beta or self.models[0].tunable:
            raise ConfigError("the high-fidelity model cannot have hyperparameters")
        for k, m in enumerate(self.models):
            if m.model_id != k:
                raise ConfigError("model ids must be 0..M in order")
        if self.hand_beta is None:
            self.hand_beta = self.default_betas()

    @property
    def M(self):
        return len(self.models) - 1

    @property
    def tunable_ids(self):
        return [m.model_id for m in self.models if m.tunable]

    @property
    def beta_dim(self):
        return sum(self.models[i].n_beta for i in self.tunable_ids)

    @property
    def beta_bounds(self):
        """Bounds of the flat tunable hyperparameter vector."""
        return [b for i in self.tunable_ids for b in self.models[i].bounds]

    def default_betas(self):
        return [np.asarray(m.default_beta, dtype=float) for m in self.models]

    def expand_beta(self, flat, base=None):
        """Per-model hyperparameter list from a flat tunable vector."""
        flat = np.asarray(flat, dtype=float).reshape(-1)
        if flat.size != self.beta_dim:
            raise DomainError(f"expected {self.beta_dim} tunable hyperparameters, got {flat.size}")
        betas = [np.array(b, dtype=float) for b in (base if base is not None else self.hand_beta)]
        k = 0
        for i in self.tunable_ids:
            n = self.models[i].n_beta
            betas[i] = self.models[i].check_beta(flat[k:k + n])
            k += n
        return betas

    def flatten_beta(self, betas):
        parts = [np.asarray(betas[i], dtype=float).reshape(-1) for i in self.tunable_ids]
        return np.concatenate(parts) if parts else np.empty(0)

    def costs(self, betas):
        """Low-fidelity cost vector w_1..w_M in high-fidelity units."""
        return np.array([self.models[i].cost(betas[i]) for i in range(1, self.M + 1)])


class CostLedger:
    """Thread-safe record of every charged model evaluation."""

    def __init__(self):
        self._lock = threading.Lock()
        self.entries = []

    def charge(self, category, model_id, count, unit_cost, beta=()):
        if category not in COST_CATEGORIES:
            raise ValueError(f"unknown cost category {category!r}")
        with self._lock:
            self.entries.append((category, int(model_id), int(count), float(unit_cost),
                                 tuple(float(b) for b in np.ravel(beta))))

    def relabel(self, indices, category):
        """Move entries to another category (e.g. a tuning pilot that gets reused)."""
        if category not in COST_CATEGORIES:
            raise ValueError(f"unknown cost category {category!r}")
        with self._lock:
            for k in indices:
                _, m, c, w, b = self.entries[k]
                self.entries[k] = (category, m, c, w, b)

    def total(self, category=None):
        with self._lock:
            terms = [c * w for cat, _, c, w, _ in self.entries if category in (None, cat)]
        return math.fsum(terms)

    def charged(self):
        """Total of everything except offline work, which is free by definition."""
        with self._lock:
            terms = [c * w for cat, _, c, w, _ in self.entries if cat != "offline"]
        return math.fsum(terms)

    def counts(self, model_id, category=None):
        with self._lock:
            return sum(c for cat, m, c, _, _ in self.entries if m == model_id and category in (None, cat))

    def summary(self):
        out = {cat: self.total(cat) for cat in COST_CATEGORIES}
        out["charged"] = self.charged()
        return out

    def merge(self, other):
        with self._lock:
            self.entries.extend(other.entries)


def evaluate(ensemble, model_id, beta_i, points, ledger=None, category="allocation"):
    """Evaluate one model on a batch of points and charge its cost."""
    if not 0 <= model_id <= ensemble.M:
        raise DomainError(f"model id {model_id} out of range 0..{ensemble.M}")
    spec = ensemble.models[model_id]
    beta_i = spec.check_beta(beta_i)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] == 0:
        return np.empty(0)
    values = np.asarray(spec.func(points, beta_i), dtype=float).reshape(-1)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        k = int(bad[0])
        raise EvaluationError(f"model {model_id} returned {values[k]} at point {k}", point=points[k], index=k)
    if ledger is not None:
        ledger.charge(category, model_id, points.shape[0], spec.cost(beta_i), beta_i)
    return values


# ---------------------------------------------------------------------------
# Shipped benchmarks


def _read_json(name):
    return json.loads(resources.files("acvtune").joinpath("data", name).read_text())


def benchmark_names():
    return sorted(_read_json("benchmarks.json"))


def resolve_config(config=None):
    """Merge a user config over the shipped defaults of its benchmark."""
    config = dict(config or {})
    table = _read_json("benchmarks.json")
    name = config.get("benchmark", "trajectory-1d")
    if name not in table:
        raise ConfigError(f"unknown benchmark {name!r}; choose from {sorted(table)}")
    base = table[name]
    if "base" in base:
        merged = copy.deepcopy(table[base["base"]])
        merged.update({k: v for k, v in base.items() if k != "base"})
        base = merged
    out = copy.deepcopy(base)
    for k, v in config.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    out["benchmark"] = name
    return out


def load_config(path=None, overrides=None):
    """Read a JSON benchmark config and apply ``overrides``."""
    config = {}
    if path is not None:
        try:
            with open(path) as fh:
                config = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(config, dict):
            raise ConfigError("config file must hold a JSON object")
    config.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return resolve_config(config)


def affine_cost(speedup_lo, speedup_hi, ratio_max):
    """Cost law ``a/ratio + b`` hitting both speedup endpoints exactly.

    ``ratio`` is the step ratio dt/dt_hf in [1, ratio_max].  A pure 1/dt law
    cannot bracket a speedup span narrower than ``ratio_max`` so a constant
    overhead term is added.
    """
    c_lo, c_hi = 1.0 / speedup_lo, 1.0 / speedup_hi
    a = (c_lo - c_hi) / (1.0 - 1.0 / ratio_max)
    b = c_lo - a
    return a, b


def dt_max_stable(physics):
    """Largest step for which RK4 stays stable on the relaxation mode."""
    return 2.785 / float(physics["relax_rate_max"])


def _quad_features(u):
    d = u.shape[1]
    cols = [np.ones(u.shape[0])] + [u[:, i] for i in range(d)]
    cols += [u[:, i] * u[:, j] for i in range(d) for j in range(i, d)]
    return np.column_stack(cols)


@numba.njit(cache=True)
def _quad_eval(u, coef):
    """Evaluate the quadratic model without forming the feature matrix."""
    n, d = u.shape
    out = np.empty(n)
    for p in range(n):
        s = coef[0]
        for i in range(d):
            s += coef[1 + i] * u[p, i]
        k = 1 + d
        for i in range(d):
            for j in range(i, d):
                s += coef[k] * u[p, i] * u[p, j]
                k += 1
        out[p] = s
    return out


def _fingerprint(config):
    keys = ("inputs", "physics", "dt_hf", "surrogate_train")
    blob = json.dumps({k: config[k] for k in keys}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def fit_surrogate(config):
    """Least-squares quadratic fit of every QoI on high-fidelity samples.

    Inputs are scaled to the unit box before building features.  The fit is
    offline work and never charged to a run.
    """
    inputs = InputSpec.from_config(config["inputs"])
    train = config["surrogate_train"]
    rng = rng_for(int(train["seed"]), 0)
    u = rng.random((int(train["n"]), inputs.dimension))
    y = trajectory.simulate(inputs.from_unit(u), config["dt_hf"], config["physics"])
    X = _quad_features(u)
    coef = {}
    for k, q in enumerate(trajectory.QOI_NAMES):
        coef[q] = np.linalg.lstsq(X, y[:, k], rcond=None)[0].tolist()
    return {"fingerprint": _fingerprint(config), "coefficients": coef}


_SURROGATE_CACHE = {}


def surrogate_coefficients(config):
    fp = _fingerprint(config)
    if fp not in _SURROGATE_CACHE:
        shipped = _read_json("surrogate_coefficients.json")
        if shipped.get("fingerprint") == fp:
            _SURROGATE_CACHE[fp] = shipped
        else:
            _SURROGATE_CACHE[fp] = fit_surrogate(config)
    return _SURROGATE_CACHE[fp]


def _to_unit(inputs, z):
    cols = []
    for k, m in enumerate(inputs.marginals):
        if m.dist == "uniform":
            cols.append((z[:, k] - m.a) / (m.b - m.a))
        else:
            cols.append((z[:, k] - m.a) / m.b)
    return np.column_stack(cols)


def _trajectory_ensemble(config):
    qoi = config["qoi"]
    if qoi not in trajectory.QOI_NAMES:
        raise ConfigError(f"unknown QoI {qoi!r}; choose from {list(trajectory.QOI_NAMES)}")
    q = trajectory.QOI_NAMES.index(qoi)
    physics = {**trajectory.DEFAULT_PHYSICS, **config["physics"]}
    inputs = InputSpec.from_config(config["inputs"])
    if inputs.dimension != 5:
        raise ConfigError("the trajectory benchmark takes exactly five inputs")
    dt_hf = float(config["dt_hf"])
    ratio_max = float(config["dt_ratio_max"])
    dt_max = dt_hf * ratio_max
    if dt_max > dt_max_stable(physics):
        raise ConfigError(f"dt upper bound {dt_max} exceeds the RK4 stability limit {dt_max_stable(physics):.4f}")
    tunable = set(config["tunable"])
    unknown = tunable - {"reduced_physics", "coarse_step"}
    if unknown:
        raise ConfigError(f"unknown tunable models {sorted(unknown)}")

    def hf(z, beta):
        return trajectory.simulate(z, dt_hf, physics)[:, q]

    def unit_cost(beta):
        return 1.0

    models = [ModelSpec(0, "high_fidelity", hf, unit_cost)]
    for mid, name, const_rho in ((1, "reduced_physics", True), (2, "coarse_step", False)):
        lo_s, hi_s = config["speedup"][name]
        a, b = affine_cost(lo_s, hi_s, ratio_max)
        hand = float(config["hand_dt"][name])

        def func(z, beta, const_rho=const_rho, hand=hand, tun=name in tunable):
            dt = beta[0] if tun else hand
            return trajectory.simulate(z, dt, physics, constant_density=const_rho)[:, q]

        if name in tunable:
            def cost(beta, a=a, b=b):
                return a * dt_hf / beta[0] + b
            models.append(ModelSpec(mid, name, func, cost, ((dt_hf, dt_max),), (hand,), True))
        else:
            fixed = a * dt_hf / hand + b
            models.append(ModelSpec(mid, name, func, lambda beta, c=fixed: c))

    sur = surrogate_coefficients(config)["coefficients"][qoi]
    coef = np.array(sur)

    def surrogate(z, beta):
        return _quad_eval(np.ascontiguousarray(_to_unit(inputs, z)), coef)

    cs = float(config["surrogate_cost"])
    models.append(ModelSpec(3, "surrogate", surrogate, lambda beta: cs))
    ens = ModelEnsemble(config["benchmark"], inputs, models, qoi=qoi, config=config)
    return ens


def _analytic_features(z):
    return np.column_stack([z[:, 0], z[:, 1], z[:, 2], (z[:, 0] ** 2 - 1.0) / math.sqrt(2.0), z[:, 0] * z[:, 1]])


def _analytic_ensemble(config):
    """Polynomial models of standard normal inputs with closed-form statistics.

    The five features are orthonormal under the input law, so the model
    covariance is exactly ``L L^T`` for the loading matrix ``L``.
    """
    from .stats import ModelStats

    L = np.asarray(config["loadings"], dtype=float)
    mu = np.asarray(config["means"], dtype=float)
    costs = [float(c) for c in config["costs"]]
    if L.shape != (len(costs) + 1, 5) or mu.size != len(costs) + 1:
        raise ConfigError("analytic loadings must be (M+1) x 5 with M+1 means")
    inputs = InputSpec(tuple(Marginal("normal", 0.0, 1.0, f"z{k}") for k in range(3)))
    models = []
    for i in range(len(costs) + 1):
        def func(z, beta, i=i):
            return mu[i] + _analytic_features(z) @ L[i]
        w = 1.0 if i == 0 else costs[i - 1]
        models.append(ModelSpec(i, f"poly{i}", func, lambda beta, w=w: w))
    C = L @ L.T
    ens = ModelEnsemble("analytic", inputs, models, config=config)
    ens.exact_stats = ModelStats.from_covariance(C)
    ens.exact_mean = float(mu[0])
    return ens


def make_benchmark_ensemble(config=None):
    """Build a shipped benchmark ensemble from a (partial) config dict."""
    config = resolve_config(config)
    kind = config.get("kind")
    if kind == "trajectory":
        return _trajectory_ensemble(config)
    if kind == "analytic":
        return _analytic_ensemble(config)
    raise ConfigError(f"unknown benchmark kind {kind!r}")
