"""Tanh-squashed mixture-of-Gaussians location distribution.

Placement parameters theta = [l_x, l_y, phi] in (-1,1)^3 are produced by
squashing a latent u ~ sum_k w_k N(mu_k, diag(sigma_k^2)) through
theta = tanh(u / tau). The temperature tau keeps the squash nearly linear
over the useful range, so mu/sigma live on a scale of roughly tau.

Sampling uses the one-hot component selector Gamma and the
reparameterization u = mu_G + sigma_G * r with r ~ N(0, I), so gradients
flow through mu and sigma.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

DEFAULT_TAU = 3000.0
LOG_2PI = math.log(2.0 * math.pi)

_WEIGHT_TOL = 1e-9
_LOG_CLAMP = 1e-300


class ValidationError(ValueError):
    """Raised when distribution parameters violate their invariants."""


@dataclass
class Component:
    mu: np.ndarray      # (3,) latent-space mean, unbounded
    sigma: np.ndarray   # (3,) latent-space std, strictly positive
    weight: float

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.weight = float(self.weight)


@dataclass
class MixtureParams:
    components: list[Component]
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        self.tau = float(self.tau)
        self.validate()

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    @property
    def mus(self) -> np.ndarray:
        return np.stack([c.mu for c in self.components])

    @property
    def sigmas(self) -> np.ndarray:
        return np.stack([c.sigma for c in self.components])

    def validate(self) -> None:
        if self.k < 1:
            raise ValidationError("mixture needs at least one component")
        if not np.isfinite(self.tau) or self.tau <= 0:
            raise ValidationError(f"tau must be finite and positive, got {self.tau}")
        for i, c in enumerate(self.components):
            if c.mu.shape != (3,) or c.sigma.shape != (3,):
                raise ValidationError(f"component {i}: mu/sigma must have shape (3,)")
            if not (np.isfinite(c.mu).all() and np.isfinite(c.sigma).all()):
                raise ValidationError(f"component {i}: non-finite parameters")
            if not (c.sigma > 0).all():
                raise ValidationError(f"component {i}: sigma must be strictly positive")
            if not np.isfinite(c.weight) or c.weight < 0 or c.weight > 1:
                raise ValidationError(f"component {i}: weight {c.weight} outside [0,1]")
        total = float(self.weights.sum())
        if abs(total - 1.0) > _WEIGHT_TOL:
            raise ValidationError(f"weights sum to {total!r}, expected 1 within {_WEIGHT_TOL}")

    # -- serialization: structured text, reals at >= 15 significant digits --

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "components": [
                {"mu": c.mu.tolist(), "sigma": c.sigma.tolist(), "weight": c.weight}
                for c in self.components
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureParams":
        comps = [Component(np.array(c["mu"]), np.array(c["sigma"]), c["weight"]) for c in d["components"]]
        return cls(components=comps, tau=d["tau"])

    def to_json(self) -> str:
        # json emits repr-accurate floats (17 significant digits).
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MixtureParams":
        return cls.from_dict(json.loads(text))


@dataclass
class LocationSample:
    """One reparameterized draw: selector, noise, latent and placement."""

    gamma: np.ndarray   # (K,) one-hot int
    r: np.ndarray       # (3,) standard-normal draw
    u: np.ndarray       # (3,) latent, u = mu_G + sigma_G * r
    theta: np.ndarray   # (3,) placement, tanh(u/tau), strictly inside (-1,1)

    @property
    def component(self) -> int:
        return int(np.argmax(self.gamma))


def uniform_mixture(mus: np.ndarray, sigmas: np.ndarray, tau: float = DEFAULT_TAU) -> MixtureParams:
    """Mixture with equal weights 1/K from stacked (K,3) mu and sigma arrays."""
    mus = np.atleast_2d(np.asarray(mus, dtype=float))
    sigmas = np.atleast_2d(np.asarray(sigmas, dtype=float))
    k = mus.shape[0]
    return MixtureParams(
        components=[Component(mus[i], sigmas[i], 1.0 / k) for i in range(k)],
        tau=tau,
    )


def one_hot(k: int, index: int) -> np.ndarray:
    gamma = np.zeros(k, dtype=int)
    gamma[index] = 1
    return gamma


def _check_gamma(psi: MixtureParams, gamma: np.ndarray) -> int:
    gamma = np.asarray(gamma)
    if gamma.shape != (psi.k,) or gamma.sum() != 1 or not np.isin(gamma, (0, 1)).all():
        raise ValidationError(f"gamma must be one-hot of length {psi.k}")
    return int(np.argmax(gamma))


def sample_component(psi: MixtureParams, rng: np.random.Generator) -> np.ndarray:
    """Draw the one-hot selector Gamma; component k with probability w_k."""
    psi.validate()
    w = psi.weights / psi.weights.sum()  # exact renorm of the <=1e-9 slack
    index = int(rng.choice(psi.k, p=w))
    return one_hot(psi.k, index)


_THETA_MAX = float(np.nextafter(1.0, 0.0))


def reparam_sample(psi: MixtureParams, gamma: np.ndarray, r: np.ndarray) -> LocationSample:
    """Deterministic reparameterized draw from (Gamma, r).

    Saturated draws (|u/tau| large enough that tanh rounds to +-1.0) are
    clamped to the largest float strictly inside (-1, 1).
    """
    k = _check_gamma(psi, gamma)
    r = np.asarray(r, dtype=float)
    if r.shape != (3,):
        raise ValidationError("r must have shape (3,)")
    comp = psi.components[k]
    u = comp.mu + comp.sigma * r
    theta = np.clip(np.tanh(u / psi.tau), -_THETA_MAX, _THETA_MAX)
    return LocationSample(gamma=np.asarray(gamma, dtype=int), r=r, u=u, theta=theta)


def draw_sample(psi: MixtureParams, rng: np.random.Generator) -> LocationSample:
    """Full ancestral draw: Gamma from the weights, then r ~ N(0, I)."""
    gamma = sample_component(psi, rng)
    r = rng.standard_normal(3)
    return reparam_sample(psi, gamma, r)


def log1m_tanh_sq(z: np.ndarray) -> np.ndarray:
    """log(1 - tanh(z)^2), stable for |z| up to the float range.

    For large |z| the direct form underflows (1 - tanh^2 ~ 4 e^{-2|z|});
    the identity log(1-tanh^2(z)) = 2(log 2 - z - log(1+e^{-2z})) holds on
    z >= 0 and is used whenever |z| > 20.
    """
    z = np.asarray(z, dtype=float)
    az = np.abs(z)
    out = np.empty_like(az)
    small = az <= 20.0
    t = np.tanh(az[small])
    out[small] = np.log(np.maximum(1.0 - t * t, _LOG_CLAMP))
    zl = az[~small]
    out[~small] = 2.0 * (math.log(2.0) - zl - np.log1p(np.exp(-2.0 * zl)))
    return out


def entropy_loss(
    psi: MixtureParams,
    gamma: np.ndarray,
    r: np.ndarray,
    weight_mode: str = "raw",
    diagnostics: dict | None = None,
) -> float:
    """Per-sample negative log-density surrogate of the squashed draw.

    Returns, summed over the three dimensions,

        -w_k + r^2/2 + log(2*pi)/2 + log(sigma_k) + log(1 - tanh^2(u/tau)) - log(tau)

    for the selected component k (`weight_mode="raw"`, the default: the raw
    weight enters linearly, once per dimension). The expectation of this
    quantity is the entropy bonus used by the placement objectives; it grows
    as the distribution spreads out.

    `weight_mode="exact"` replaces the per-dimension -w_k term with a single
    -log(w_k), which makes the value the exact negative log joint density of
    (theta, Gamma) under the change of variables.
    """
    if weight_mode not in ("raw", "exact"):
        raise ValueError(f"unknown weight_mode {weight_mode!r}")
    k = _check_gamma(psi, gamma)
    comp = psi.components[k]
    r = np.asarray(r, dtype=float)
    u = comp.mu + comp.sigma * r
    z = u / psi.tau
    if diagnostics is not None:
        t = np.tanh(z)
        diagnostics["clamped"] = bool(np.any(1.0 - t * t < _LOG_CLAMP))
    per_dim = (
        0.5 * r * r
        + 0.5 * LOG_2PI
        + np.log(comp.sigma)
        + log1m_tanh_sq(z)
        - math.log(psi.tau)
    )
    if weight_mode == "raw":
        return float(np.sum(per_dim - comp.weight))
    return float(np.sum(per_dim) - math.log(comp.weight))


def entropy_grads(psi: MixtureParams, gamma: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """d(entropy_loss)/d(mu_k), d(entropy_loss)/d(sigma_k) for the drawn component.

    Only the selected component has nonzero gradient; the weight term does not
    depend on mu or sigma, so both modes share these derivatives.
    """
    k = _check_gamma(psi, gamma)
    comp = psi.components[k]
    r = np.asarray(r, dtype=float)
    t = np.tanh((comp.mu + comp.sigma * r) / psi.tau)
    dmu = np.zeros((psi.k, 3))
    dsigma = np.zeros((psi.k, 3))
    dmu[k] = -2.0 * t / psi.tau
    dsigma[k] = 1.0 / comp.sigma - 2.0 * t * r / psi.tau
    return dmu, dsigma


def log_density_theta(psi: MixtureParams, theta: np.ndarray) -> float:
    """Log of the full mixture density of theta, via change of variables.

    log p(theta) = logsumexp_k [log w_k + log N(atanh(theta)*tau | mu_k, sigma_k^2)]
                   + sum_d log(tau / (1 - theta_d^2))
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (3,):
        raise ValidationError("theta must have shape (3,)")
    if np.any(np.abs(theta) >= 1.0):
        raise ValueError("theta components must lie strictly inside (-1, 1)")
    u = np.arctanh(theta) * psi.tau
    mus, sigmas = psi.mus, psi.sigmas
    log_norm = -0.5 * ((u - mus) / sigmas) ** 2 - np.log(sigmas) - 0.5 * LOG_2PI
    per_comp = np.log(np.maximum(psi.weights, _LOG_CLAMP)) + log_norm.sum(axis=1)
    m = per_comp.max()
    lse = m + math.log(np.exp(per_comp - m).sum())
    jac = float(np.sum(math.log(psi.tau) - np.log1p(-theta * theta)))
    return float(lse + jac)
