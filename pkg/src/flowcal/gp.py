"""Gaussian-process surrogate with expected-improvement batch proposals.

The kernel is squared-exponential, k(z, z') = s^2 exp(-||z - z'||^2 / (2 l^2)),
with additive observation noise.  Hyperparameters maximize the log marginal
likelihood over a fixed 10 x 10 x 5 log-grid (length scale, signal variance,
noise variance); the Cholesky factor of K + noise*I is cached, with jitter
escalating from 1e-8 when factorization fails.  The prior mean is zero, so
callers should feed roughly standardized values (the calibration loop does).

Everything here works on minimization: expected improvement is the expected
reduction below the incumbent best value.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from scipy.spatial.distance import cdist
from scipy.stats import norm
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .errors import NumericError

LENGTH_SCALE_GRID = np.logspace(-1.5, 1.0, 10)
SIGNAL_VARIANCE_GRID = np.logspace(-2.0, 2.0, 10)
NOISE_VARIANCE_GRID = np.logspace(-6.0, -1.0, 5)

_BASE_JITTER = 1e-8
_MAX_JITTER = 1e-2


@dataclass(frozen=True)
class SquaredExponentialKernel:
    signal_variance: float
    length_scale: float
    noise_variance: float

    def __post_init__(self):
        if min(self.signal_variance, self.length_scale, self.noise_variance) <= 0:
            raise ValueError("kernel hyperparameters must be strictly positive")

    def cross(self, Z1: np.ndarray, Z2: np.ndarray) -> np.ndarray:
        sq = cdist(Z1, Z2, "sqeuclidean")
        return self.signal_variance * np.exp(-sq / (2.0 * self.length_scale**2))


def _chol_with_jitter(K: np.ndarray) -> np.ndarray:
    jitter = 0.0
    while True:
        try:
            return cholesky(K + jitter * np.eye(len(K)), lower=True)
        except LinAlgError:
            jitter = _BASE_JITTER if jitter == 0.0 else jitter * 10.0
            if jitter > _MAX_JITTER:
                raise NumericError(
                    f"Cholesky failed even with jitter {_MAX_JITTER:g}"
                ) from None


def _log_marginal_likelihood(L: np.ndarray, v: np.ndarray) -> float:
    alpha = solve_triangular(L.T, solve_triangular(L, v, lower=True), lower=False)
    n = len(v)
    return float(
        -0.5 * v @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * np.log(2 * np.pi)
    )


class GaussianProcessSurrogate(BaseEstimator, RegressorMixin):
    """Zero-mean GP regressor over latent (or scaled original) coordinates.

    With ``kernel=None`` the hyperparameters are selected on the fixed
    log-grid; passing a :class:`SquaredExponentialKernel` pins them.
    """

    def __init__(self, kernel: SquaredExponentialKernel | None = None):
        self.kernel = kernel

    def fit(self, Z, v):
        Z = check_array(Z, dtype=float)
        v = np.asarray(v, dtype=float).ravel()
        if len(Z) != len(v):
            raise ValueError("point and value counts differ")
        if len(Z) < 2:
            raise ValueError("need at least 2 observations")
        sq = cdist(Z, Z, "sqeuclidean")
        off_diag = sq[~np.eye(len(Z), dtype=bool)]
        if off_diag.size and np.min(off_diag) < 1e-10**2:
            raise ValueError("duplicate training points closer than 1e-10")

        if self.kernel is not None:
            kern = self.kernel
            L = _chol_with_jitter(
                kern.signal_variance * np.exp(-sq / (2 * kern.length_scale**2))
                + kern.noise_variance * np.eye(len(Z))
            )
        else:
            kern, L, best_lml = None, None, -np.inf
            eye = np.eye(len(Z))
            for ell in LENGTH_SCALE_GRID:
                corr = np.exp(-sq / (2.0 * ell**2))
                for sf2 in SIGNAL_VARIANCE_GRID:
                    base = sf2 * corr
                    for sn2 in NOISE_VARIANCE_GRID:
                        try:
                            candidate_L = _chol_with_jitter(base + sn2 * eye)
                        except NumericError:
                            continue
                        lml = _log_marginal_likelihood(candidate_L, v)
                        if lml > best_lml:
                            best_lml = lml
                            kern = SquaredExponentialKernel(sf2, ell, sn2)
                            L = candidate_L
            if kern is None:
                raise NumericError("no kernel on the grid admits a Cholesky factor")
            self.log_marginal_likelihood_ = best_lml

        self.kernel_ = kern
        self.chol_ = L
        self.train_points_ = Z
        self.train_values_ = v
        self.alpha_ = solve_triangular(
            L.T, solve_triangular(L, v, lower=True), lower=False
        )
        return self

    def _check_fitted(self):
        if not hasattr(self, "chol_"):
            raise NotFittedError("GaussianProcessSurrogate is not fitted")

    def posterior(self, Z) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and (noise-free) variance at each row of Z.

        Variance is clamped at zero to absorb -1e-12-scale numerical noise.
        """
        self._check_fitted()
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        k = self.kernel_.cross(self.train_points_, Z)
        mean = k.T @ self.alpha_
        w = solve_triangular(self.chol_, k, lower=True)
        var = self.kernel_.signal_variance - np.einsum("ij,ij->j", w, w)
        return mean, np.maximum(var, 0.0)

    def predict(self, Z, return_std: bool = False):
        mean, var = self.posterior(Z)
        if return_std:
            return mean, np.sqrt(var)
        return mean

    def best_value(self) -> float:
        self._check_fitted()
        return float(np.min(self.train_values_))

    def with_observation(self, z: np.ndarray, value: float) -> "GaussianProcessSurrogate":
        """New surrogate with one extra observation and the same kernel."""
        self._check_fitted()
        out = GaussianProcessSurrogate(kernel=self.kernel_)
        return out.fit(
            np.vstack([self.train_points_, z]),
            np.append(self.train_values_, value),
        )


def ei_value(mu, sigma, best):
    """Closed-form expected improvement below ``best`` for minimization.

    Zero wherever sigma == 0, per the surrogate contract.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    out = np.zeros(np.broadcast(mu, sigma).shape)
    positive = sigma > 0
    if np.any(positive):
        mu_p = np.broadcast_to(mu, out.shape)[positive]
        sig_p = np.broadcast_to(sigma, out.shape)[positive]
        u = (best - mu_p) / sig_p
        out[positive] = (best - mu_p) * norm.cdf(u) + sig_p * norm.pdf(u)
    return out if out.ndim else float(out)


def expected_improvement(gp: GaussianProcessSurrogate, Z, best: float) -> np.ndarray:
    mean, var = gp.posterior(Z)
    return ei_value(mean, np.sqrt(var), best)


def _compass_search(gp, best, lower, upper, starts, max_evals):
    """Lockstep coordinate pattern search maximizing EI from many starts."""
    d = starts.shape[1]
    points = starts.copy()
    values = expected_improvement(gp, points, best)
    step = np.full(len(points), 0.25)
    span = upper - lower
    evals = 1  # per-start evaluations consumed so far
    while evals + 2 * d <= max_evals and np.any(step > 1e-3):
        improved = np.zeros(len(points), dtype=bool)
        for axis in range(d):
            for sign in (1.0, -1.0):
                candidates = points.copy()
                candidates[:, axis] = np.clip(
                    candidates[:, axis] + sign * step * span[axis],
                    lower[axis],
                    upper[axis],
                )
                cand_values = expected_improvement(gp, candidates, best)
                take = cand_values > values
                points[take] = candidates[take]
                values[take] = cand_values[take]
                improved |= take
        evals += 2 * d
        step[~improved] *= 0.5
    return points, values


def propose_batch(gp: GaussianProcessSurrogate, q: int, lower, upper, seed: int,
                  n_starts: int = 64, max_evals: int = 200,
                  min_distance: float = 1e-6) -> np.ndarray:
    """Sequential constant-liar batch of q acquisition maximizers.

    Each pick maximizes expected improvement by seeded multi-start pattern
    search over the box, then is imputed into the surrogate at its posterior
    mean before the next pick.  Returned points are pairwise at least
    ``min_distance`` apart (enforced by perturbation).
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    d = len(lower)
    rng = np.random.default_rng(seed)
    work = gp
    picks: list[np.ndarray] = []
    for _ in range(q):
        starts = rng.uniform(lower, upper, size=(n_starts, d))
        points, values = _compass_search(
            work, work.best_value(), lower, upper, starts, max_evals
        )
        z = points[int(np.argmax(values))]
        z = _separate(z, picks, work.train_points_, lower, upper, rng, min_distance)
        picks.append(z)
        mu, _ = work.posterior(z[None, :])
        work = work.with_observation(z, float(mu[0]))
    return np.array(picks)


def _separate(z, picks, train_points, lower, upper, rng, min_distance):
    """Perturb z until it clears both earlier picks and the training set."""
    for _ in range(100):
        too_close = any(np.linalg.norm(z - p) < min_distance for p in picks)
        too_close |= bool(
            len(train_points)
            and np.min(np.linalg.norm(train_points - z, axis=1)) < 1e-8
        )
        if not too_close:
            return z
        z = np.clip(
            z + rng.uniform(-min_distance, min_distance, size=len(z)) * 10.0,
            lower,
            upper,
        )
    return z
