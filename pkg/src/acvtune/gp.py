"""Gaussian-process regression and expected improvement on the unit cube."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.special import ndtr
from scipy.stats import qmc

LOG_BOUNDS = {
    "length": (math.log(0.02), math.log(20.0)),
    "signal": (math.log(1e-3), math.log(1e2)),
    "noise": (math.log(1e-8), math.log(1.0)),
}
PIN_JITTER = 1e-10


def se_kernel(A, B, lengths, signal):
    d = (A[:, None, :] - B[None, :, :]) / lengths
    return signal * np.exp(-0.5 * np.sum(d * d, axis=-1))


@dataclass
class GaussianProcess:
    """Squared-exponential GP with constant mean fitted by generalized least squares.

    Targets are standardized internally.  ``noise=None`` estimates the noise
    variance by maximum likelihood; a number pins it (0 gives an
    interpolating model up to a tiny jitter).
    """

    lengths: np.ndarray = None
    signal: float = 1.0
    noise: float = None
    mean: float = 0.0

    def _unpack(self, theta, d, pinned):
        lengths = np.exp(theta[:d])
        signal = math.exp(theta[d])
        noise = pinned if pinned is not None else math.exp(theta[d + 1])
        return lengths, signal, noise

    def _nll(self, theta, X, y, pinned):
        lengths, signal, noise = self._unpack(theta, X.shape[1], pinned)
        K = se_kernel(X, X, lengths, signal) + (noise + PIN_JITTER) * np.eye(len(y))
        try:
            c = cho_factor(K, lower=True)
        except np.linalg.LinAlgError:
            return 1e10
        one = np.ones(len(y))
        Ki1 = cho_solve(c, one)
        m = float(Ki1 @ y / (one @ Ki1))
        r = y - m
        return 0.5 * float(r @ cho_solve(c, r)) + float(np.sum(np.log(np.diag(c[0]))))

    def fit(self, X, y, rng, n_starts=5, noise=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float)
        self.X = X
        self._ymu = float(np.mean(y))
        self._ysd = float(np.std(y)) or 1.0
        ys = (y - self._ymu) / self._ysd
        d = X.shape[1]
        pinned = noise if noise is not None else self.noise
        bounds = [LOG_BOUNDS["length"]] * d + [LOG_BOUNDS["signal"]]
        if pinned is None:
            bounds.append(LOG_BOUNDS["noise"])
        lo = np.array([b[0] for b in bounds])
        hi = np.array([b[1] for b in bounds])
        starts = [np.array([math.log(0.3)] * d + [0.0] + ([math.log(1e-2)] if pinned is None else []))]
        while len(starts) < n_starts:
            starts.append(lo + (hi - lo) * rng.random(lo.size))
        best = None
        for t0 in starts:
            res = minimize(self._nll, t0, args=(X, ys, pinned), method="L-BFGS-B", bounds=bounds)
            if best is None or res.fun < best.fun:
                best = res
        if not np.isfinite(best.fun) or best.fun >= 1e10:
            raise np.linalg.LinAlgError("GP likelihood could not be evaluated")
        self.lengths, self.signal, self.noise_fit = self._unpack(best.x, d, pinned)
        K = se_kernel(X, X, self.lengths, self.signal) + (self.noise_fit + PIN_JITTER) * np.eye(len(ys))
        self._c = cho_factor(K, lower=True)
        one = np.ones(len(ys))
        Ki1 = cho_solve(self._c, one)
        self.mean = float(Ki1 @ ys / (one @ Ki1))
        self._alpha = cho_solve(self._c, ys - self.mean)
        self._Ki1 = Ki1
        self._one_Ki1 = float(one @ Ki1)
        return self

    def predict(self, Xs):
        """Posterior mean and standard deviation of the latent function."""
        Xs = np.atleast_2d(Xs)
        k = se_kernel(Xs, self.X, self.lengths, self.signal)
        mu = self.mean + k @ self._alpha
        v = cho_solve(self._c, k.T)
        var = self.signal - np.sum(k * v.T, axis=1)
        var = np.maximum(var, 0.0)
        return mu * self._ysd + self._ymu, np.sqrt(var) * self._ysd

    def params(self):
        return {"lengths": np.asarray(self.lengths).tolist(), "signal": self.signal, "noise": self.noise_fit,
                "mean": self.mean * self._ysd + self._ymu}


def expected_improvement(mu, sd, best):
    """Expected improvement for minimization; zero where the posterior is certain."""
    mu = np.asarray(mu, dtype=float)
    sd = np.asarray(sd, dtype=float)
    out = np.maximum(best - mu, 0.0)
    pos = sd > 1e-12
    z = (best - mu[pos]) / sd[pos]
    out[pos] = (best - mu[pos]) * ndtr(z) + sd[pos] * np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return out


def maximize_ei(gp, best, d, rng, n_candidates=2048, n_polish=3):
    """Maximize EI over the unit cube: scrambled Sobol screen, then local polish."""
    sob = qmc.Sobol(d, scramble=True, seed=rng)
    cand = sob.random(n_candidates)
    mu, sd = gp.predict(cand)
    ei = expected_improvement(mu, sd, best)
    order = np.argsort(-ei, kind="stable")[:n_polish]
    best_x, best_ei = cand[order[0]], ei[order[0]]

    def neg(x):
        m, s = gp.predict(x[None, :])
        return -float(expected_improvement(m, s, best)[0])

    for k in order:
        res = minimize(neg, cand[k], method="L-BFGS-B", bounds=[(0.0, 1.0)] * d)
        if -res.fun > best_ei:
            best_x, best_ei = np.clip(res.x, 0.0, 1.0), -res.fun
    return best_x, float(best_ei)


def maximin_lhs(n, d, rng, n_tries=200):
    """Latin hypercube design with the largest minimum pairwise distance."""
    best, best_score = None, -1.0
    sampler = qmc.LatinHypercube(d, seed=rng)
    for _ in range(n_tries):
        X = sampler.random(n)
        if n > 1:
            diff = X[:, None, :] - X[None, :, :]
            dist = np.sqrt(np.sum(diff * diff, axis=-1))
            score = float(np.min(dist[np.triu_indices(n, 1)]))
        else:
            score = 0.0
        if score > best_score:
            best, best_score = X, score
    return best
