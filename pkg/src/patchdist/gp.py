"""Gaussian-process regression and the UCB acquisition for location search.

A constant-mean (default zero) GP with a squared-exponential kernel and
per-dimension lengthscales, maintained with an incrementally extended
Cholesky factor so that one-observation updates are O(n^2). The UCB
maximizer scores a scrambled-Sobol candidate set and polishes the best
few candidates with bounded local refinement.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import qmc


class GpNumericsError(RuntimeError):
    """Gram matrix stayed ill-conditioned through jitter escalation."""


class GpState:
    """GP posterior over a box-bounded search space.

    Observations are (theta, loss) pairs; the posterior reverts to
    `prior_mean` (default 0) with variance `amplitude` far from data.
    """

    def __init__(
        self,
        lengthscale,
        amplitude: float,
        bounds,
        noise: float = 1e-6,
        prior_mean: float = 0.0,
        max_jitter: float = 1e-3,
    ):
        self.lengthscale = np.atleast_1d(np.asarray(lengthscale, dtype=float))
        if np.any(self.lengthscale <= 0):
            raise ValueError("lengthscales must be positive")
        self.amplitude = float(amplitude)
        if self.amplitude <= 0:
            raise ValueError("amplitude must be positive")
        self.noise = float(noise)
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        self.bounds = np.asarray(bounds, dtype=float)
        if self.bounds.ndim != 2 or self.bounds.shape[1] != 2:
            raise ValueError("bounds must be (d, 2)")
        if np.any(self.bounds[:, 0] > self.bounds[:, 1]):
            raise ValueError("bounds must satisfy lo <= hi")
        self.dim = self.bounds.shape[0]
        if self.lengthscale.size == 1:
            self.lengthscale = np.full(self.dim, float(self.lengthscale[0]))
        self.prior_mean = float(prior_mean)
        self.max_jitter = float(max_jitter)
        self._x = np.zeros((0, self.dim))
        self._y = np.zeros(0)
        self._chol = np.zeros((0, 0))
        self._jitter = 0.0

    @property
    def n_observations(self) -> int:
        return len(self._y)

    @property
    def observations(self):
        return self._x.copy(), self._y.copy()

    def _kernel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        d = (a[:, None, :] - b[None, :, :]) / self.lengthscale
        return self.amplitude * np.exp(-0.5 * np.sum(d * d, axis=2))

    def _rebuild(self) -> None:
        n = len(self._y)
        gram = self._kernel(self._x, self._x)
        jitter = self._jitter
        while True:
            try:
                self._chol = np.linalg.cholesky(gram + (self.noise + jitter) * np.eye(n))
                self._jitter = jitter
                return
            except np.linalg.LinAlgError:
                jitter = max(jitter * 10.0, 1e-12 * self.amplitude)
                if jitter > self.max_jitter * self.amplitude:
                    raise GpNumericsError(
                        f"Gram matrix not positive definite at jitter {jitter:g}"
                    )

    def add_observation(self, theta, loss: float) -> None:
        theta = np.asarray(theta, dtype=float).reshape(1, self.dim)
        self._x = np.vstack([self._x, theta])
        self._y = np.append(self._y, float(loss))
        n = len(self._y)
        if n == 1:
            self._rebuild()
            return
        # extend the Cholesky factor by one row
        k = self._kernel(self._x[:-1], theta)[:, 0]
        lvec = solve_triangular(self._chol, k, lower=True)
        d2 = self.amplitude + self.noise + self._jitter - float(lvec @ lvec)
        if d2 <= 1e-15 * self.amplitude:
            self._rebuild()
            return
        new = np.zeros((n, n))
        new[:-1, :-1] = self._chol
        new[-1, :-1] = lvec
        new[-1, -1] = math.sqrt(d2)
        self._chol = new

    def posterior(self, thetas) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at query points (m, d) or (d,)."""
        thetas = np.asarray(thetas, dtype=float)
        single = thetas.ndim == 1
        pts = thetas.reshape(-1, self.dim)
        if len(self._y) == 0:
            mean = np.full(len(pts), self.prior_mean)
            var = np.full(len(pts), self.amplitude)
        else:
            k_star = self._kernel(self._x, pts)  # (n, m)
            alpha = solve_triangular(
                self._chol.T,
                solve_triangular(self._chol, self._y - self.prior_mean, lower=True),
                lower=False,
            )
            mean = self.prior_mean + k_star.T @ alpha
            v = solve_triangular(self._chol, k_star, lower=True)
            var = np.maximum(self.amplitude - np.sum(v * v, axis=0), 0.0)
        if single:
            return float(mean[0]), float(var[0])
        return mean, var


def gp_posterior(gp: GpState, theta) -> tuple[float, float]:
    """Posterior (mean, variance) at a single query placement."""
    return gp.posterior(theta)


def _acquisition(gp: GpState, pts: np.ndarray, beta: float) -> np.ndarray:
    mean, var = gp.posterior(pts)
    sd = np.sqrt(var)
    if np.isinf(beta):
        return sd
    return mean + beta * sd


def sobol_points(bounds: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Scrambled Sobol points inside the box; deterministic per seed."""
    bounds = np.asarray(bounds, dtype=float)
    sampler = qmc.Sobol(d=bounds.shape[0], scramble=True, seed=int(seed))
    # draw a power-of-two block to keep the sequence balanced, then slice
    unit = sampler.random(1 << max(0, (n - 1).bit_length()))[:n]
    return bounds[:, 0] + unit * (bounds[:, 1] - bounds[:, 0])


def ucb_next(
    gp: GpState,
    beta: float = 2.0,
    seed: int = 0,
    n_candidates: int = 512,
    n_refine: int = 4,
    refine_rounds: int = 3,
    refine_samples: int = 24,
) -> np.ndarray:
    """Maximize the UCB acquisition mean + beta * sd over the search box.

    Scores a scrambled-Sobol candidate set, then refines the best
    `n_refine` candidates with batched shrinking local search (three
    rounds at 10%, 3% and 1% of the box width). beta=0 degenerates to
    pure exploitation, beta=inf to pure variance search over the
    candidate set alone.
    """
    if gp.n_observations < 1:
        raise ValueError("ucb_next needs at least one observation")
    cands = sobol_points(gp.bounds, n_candidates, seed)
    scores = _acquisition(gp, cands, beta)
    order = np.argsort(scores)[::-1]
    if np.isinf(beta):
        return cands[order[0]]

    lo, hi = gp.bounds[:, 0], gp.bounds[:, 1]
    width = hi - lo
    gen = np.random.Generator(np.random.PCG64(seed))
    centers = cands[order[:n_refine]]
    center_scores = scores[order[:n_refine]]
    for round_idx in range(refine_rounds):
        scale = width * (0.1 * 0.3**round_idx)
        probes = centers[:, None, :] + gen.normal(
            size=(len(centers), refine_samples, centers.shape[1])
        ) * scale
        probes = np.clip(probes, lo, hi).reshape(-1, centers.shape[1])
        probe_scores = _acquisition(gp, probes, beta)
        for i in range(len(centers)):
            block = probe_scores[i * refine_samples : (i + 1) * refine_samples]
            j = int(np.argmax(block))
            if block[j] > center_scores[i]:
                center_scores[i] = block[j]
                centers[i] = probes[i * refine_samples + j]
    return centers[int(np.argmax(center_scores))]
