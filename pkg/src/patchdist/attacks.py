"""Query-budgeted black-box attacks driven by a placement prior.

Four strategies over one oracle interface:

* `dop_transfer` - query each component's squashed mean once.
* `dop_rd`       - i.i.d. prior draws until success or budget.
* `dop_loa`      - GP-UCB location search inside the worst component's
                   3-sigma box (component probing, Sobol initialization,
                   then one acquisition query per step).
* `dop_dta`      - natural-evolution-strategies transfer of the full
                   mixture: every oracle call is a population sample, the
                   mixture parameters ascend the estimated natural
                   gradient with the analytic entropy term, weights are
                   renormalized each iteration.

Every oracle call is counted; a report's `queries_used` is the count at
first success (the Table-style NQ convention) or everything spent on a
failure, with `total_queries` carrying the full spend when a run
continues past the first success.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .compose import InfeasiblePlacementError, PatchSpec, check_exclusion, compose, effective_theta
from .gp import GpState, sobol_points, ucb_next
from .mixture import (
    Component,
    MixtureParams,
    ValidationError,
    reparam_sample,
    sample_component,
    uniform_mixture,
)
from .oracle import Oracle

_OMEGA_FLOOR = 1e-6
_SIGMA_FLOOR = 1e-6


@dataclass
class NesConfig:
    """Distribution-transfer attack settings (reference defaults: lr 100, population 10, 50 iterations)."""

    lr: float = 100.0
    population: int = 10
    iterations: int = 50
    lam: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be at least 2")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


@dataclass
class AttackReport:
    image_id: str
    method: str
    success: bool
    queries_used: int                      # NQ: queries to first success, or all spent
    total_queries: int
    final_theta: list | None = None
    final_psi: dict | None = None
    loss_trace: list = field(default_factory=list)
    first_success_query: int | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "method": self.method,
            "success": self.success,
            "queries_used": self.queries_used,
            "total_queries": self.total_queries,
            "final_theta": self.final_theta,
            "final_psi": self.final_psi,
            "loss_trace": self.loss_trace,
            "first_success_query": self.first_success_query,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackReport":
        return cls(**d)


def summarize_reports(reports: list[AttackReport]) -> dict:
    """ASR plus mean NQ over all attacked samples and over successes."""
    n = len(reports)
    successes = [r for r in reports if r.success]
    return {
        "n": n,
        "asr": len(successes) / n if n else 0.0,
        "mean_nq_all": float(np.mean([r.queries_used for r in reports])) if n else 0.0,
        "mean_nq_success": float(np.mean([r.queries_used for r in successes]))
        if successes
        else None,
    }


def component_means_theta(psi: MixtureParams, rotation: bool = True) -> np.ndarray:
    """Squashed component means tanh(mu_k / tau), (K, 3)."""
    theta = np.tanh(psi.mus / psi.tau)
    if not rotation:
        theta[:, 2] = 0.0
    return theta


def sample_feasible(
    psi: MixtureParams,
    gen: np.random.Generator,
    patch: PatchSpec,
    image_dims,
    exclusion=None,
    rotation: bool = True,
    max_tries: int = 100,
):
    """Prior draw whose footprint avoids the exclusion mask."""
    for _ in range(max_tries):
        gamma = sample_component(psi, gen)
        r = gen.standard_normal(3)
        sample = reparam_sample(psi, gamma, r)
        theta = effective_theta(sample.theta, rotation)
        if check_exclusion(patch, theta, exclusion, image_dims):
            return gamma, r, theta
    raise InfeasiblePlacementError(
        f"no exclusion-respecting placement found in {max_tries} draws"
    )


def dop_transfer(
    prior: MixtureParams,
    oracle: Oracle,
    image: np.ndarray,
    target,
    patch: PatchSpec,
    rotation: bool = True,
    image_id: str = "",
) -> AttackReport:
    """Mean transfer: one query per component, stop at first success."""
    prior.validate()
    thetas = component_means_theta(prior, rotation)
    trace = []
    for k in range(prior.k):
        res = oracle.query(compose(image, patch, thetas[k]), target)
        trace.append(res.loss)
        if res.success:
            return AttackReport(
                image_id=image_id,
                method="dop",
                success=True,
                queries_used=k + 1,
                total_queries=k + 1,
                final_theta=thetas[k].tolist(),
                loss_trace=trace,
                first_success_query=k + 1,
            )
    return AttackReport(
        image_id=image_id,
        method="dop",
        success=False,
        queries_used=prior.k,
        total_queries=prior.k,
        loss_trace=trace,
    )


def dop_rd(
    prior: MixtureParams,
    oracle: Oracle,
    image: np.ndarray,
    target,
    patch: PatchSpec,
    budget: int = 500,
    seed: int = 0,
    exclusion=None,
    rotation: bool = True,
    image_id: str = "",
) -> AttackReport:
    """Random sampling from the prior until success or budget exhaustion."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    prior.validate()
    gen = rng_mod.stream(seed, f"attack.dop_rd.{image_id}")
    trace = []
    for q in range(1, budget + 1):
        _, _, theta = sample_feasible(
            prior, gen, patch, image.shape[:2], exclusion=exclusion, rotation=rotation
        )
        res = oracle.query(compose(image, patch, theta), target)
        trace.append(res.loss)
        if res.success:
            return AttackReport(
                image_id=image_id,
                method="dop-rd",
                success=True,
                queries_used=q,
                total_queries=q,
                final_theta=theta.tolist(),
                loss_trace=trace,
                first_success_query=q,
            )
    return AttackReport(
        image_id=image_id,
        method="dop-rd",
        success=False,
        queries_used=budget,
        total_queries=budget,
        loss_trace=trace,
    )


def nes_gradients(
    psi: MixtureParams, draws: list[tuple[np.ndarray, np.ndarray, float]], lam: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Natural-gradient estimates of the placement objective.

    Monte-Carlo average over (Gamma, r, loss) draws of

        d omega_k = gamma_k [ L / omega_k - lam ]
        d mu_k    = gamma_k [ L sigma_k r / omega_k - lam 2 tanh(u/tau)/tau ]
        d sigma_k = gamma_k [ L sigma_k (r^2-1) / (2 omega_k)
                              + lam (1 - 2 tanh(u/tau) sigma_k r / tau) / sigma_k ]

    with u = mu_k + sigma_k r, element-wise over the three dims.
    """
    if not draws:
        raise ValueError("draws must be non-empty")
    k_total = psi.k
    w = psi.weights
    d_omega = np.zeros(k_total)
    d_mu = np.zeros((k_total, 3))
    d_sigma = np.zeros((k_total, 3))
    for gamma, r, loss in draws:
        if not np.isfinite(loss):
            raise ValueError("losses must be finite")
        k = int(np.argmax(gamma))
        if w[k] < _OMEGA_FLOOR / 10:
            raise ValidationError(f"component {k} drawn with weight {w[k]!r}")
        comp = psi.components[k]
        r = np.asarray(r, dtype=float)
        t = np.tanh((comp.mu + comp.sigma * r) / psi.tau)
        d_omega[k] += loss / w[k] - lam
        d_mu[k] += loss * comp.sigma * r / w[k] - lam * 2.0 * t / psi.tau
        d_sigma[k] += (
            loss * comp.sigma * (r * r - 1.0) / (2.0 * w[k])
            + lam * (1.0 - 2.0 * t * comp.sigma * r / psi.tau) / comp.sigma
        )
    n = len(draws)
    return d_omega / n, d_mu / n, d_sigma / n


def _apply_nes_step(psi: MixtureParams, grads, lr: float) -> MixtureParams:
    d_omega, d_mu, d_sigma = grads
    w = np.maximum(psi.weights + lr * d_omega, _OMEGA_FLOOR)
    w = w / w.sum()
    mus = psi.mus + lr * d_mu
    sigmas = np.maximum(psi.sigmas + lr * d_sigma, _SIGMA_FLOOR)
    if not (np.isfinite(w).all() and np.isfinite(mus).all() and np.isfinite(sigmas).all()):
        raise FloatingPointError("non-finite mixture update")
    return MixtureParams(
        components=[Component(mus[k], sigmas[k], w[k]) for k in range(psi.k)],
        tau=psi.tau,
    )


def dop_dta(
    prior: MixtureParams,
    oracle: Oracle,
    image: np.ndarray,
    target,
    patch: PatchSpec,
    cfg: NesConfig | None = None,
    exclusion=None,
    rotation: bool = True,
    stop_on_success: bool = True,
    image_id: str = "",
) -> AttackReport:
    """Distribution transfer: NES ascent of the mixture on the oracle.

    Component weights restart at 1/K. Each iteration draws a population,
    queries the oracle per draw, and steps the mixture; non-finite steps
    are retried at halved rates before aborting. With `stop_on_success`
    the attack returns at the first fooling query (NQ convention);
    otherwise it completes the trace and finally verifies one sample from
    the optimized mixture.
    """
    cfg = cfg or NesConfig()
    prior.validate()
    psi = uniform_mixture(prior.mus, prior.sigmas, tau=prior.tau)  # omega <- 1/K
    gen = rng_mod.stream(cfg.seed, f"attack.dop_dta.{image_id}")
    trace = []
    total = 0
    first_success = None
    success_theta = None

    for _ in range(cfg.iterations):
        draws = []
        iter_losses = []
        for _ in range(cfg.population):
            gamma, r, theta = sample_feasible(
                psi, gen, patch, image.shape[:2], exclusion=exclusion, rotation=rotation
            )
            res = oracle.query(compose(image, patch, theta), target)
            total += 1
            iter_losses.append(res.loss)
            draws.append((gamma, r, res.loss))
            if res.success and first_success is None:
                first_success = total
                success_theta = theta
                if stop_on_success:
                    return AttackReport(
                        image_id=image_id,
                        method="dop-dta",
                        success=True,
                        queries_used=first_success,
                        total_queries=total,
                        final_theta=theta.tolist(),
                        final_psi=psi.to_dict(),
                        loss_trace=trace + [float(np.mean(iter_losses))],
                        first_success_query=first_success,
                    )
        trace.append(float(np.mean(iter_losses)))
        grads = nes_gradients(psi, draws, cfg.lam)
        lr = cfg.lr
        for _ in range(12):
            try:
                psi = _apply_nes_step(psi, grads, lr)
                break
            except (FloatingPointError, ValidationError):
                lr *= 0.5
        else:
            raise FloatingPointError("distribution update stayed non-finite under step halving")

    # final draw from the optimized mixture, verified on the oracle
    _, _, theta_star = sample_feasible(
        psi, gen, patch, image.shape[:2], exclusion=exclusion, rotation=rotation
    )
    res = oracle.query(compose(image, patch, theta_star), target)
    total += 1
    success = res.success or first_success is not None
    if res.success and first_success is None:
        first_success = total
        success_theta = theta_star
    return AttackReport(
        image_id=image_id,
        method="dop-dta",
        success=success,
        queries_used=first_success if first_success is not None else total,
        total_queries=total,
        final_theta=(success_theta if success_theta is not None else theta_star).tolist(),
        final_psi=psi.to_dict(),
        loss_trace=trace,
        first_success_query=first_success,
    )


def dop_loa(
    prior: MixtureParams,
    oracle: Oracle,
    image: np.ndarray,
    target,
    patch: PatchSpec,
    n_init: int = 10,
    budget: int = 500,
    beta: float = 2.0,
    seed: int = 0,
    exclusion=None,
    rotation: bool = True,
    image_id: str = "",
) -> AttackReport:
    """GP-UCB location search inside the worst component's 3-sigma box.

    Probes each component mean (K queries, selection only), builds the
    search box [tanh((mu-3 sigma)/tau), tanh((mu+3 sigma)/tau)] of the
    worst component, spends `n_init` Sobol observations, then one UCB
    query per step until success or the budget is exhausted. All oracle
    queries count toward NQ, the selection probes included.
    """
    if n_init >= budget:
        raise ValueError("n_init must be smaller than the query budget")
    prior.validate()
    gen = rng_mod.stream(seed, f"attack.dop_loa.{image_id}")
    trace = []
    total = 0

    # component selection: probe each squashed mean
    mean_thetas = component_means_theta(prior, rotation)
    probe_losses = []
    for k in range(prior.k):
        res = oracle.query(compose(image, patch, mean_thetas[k]), target)
        total += 1
        probe_losses.append(res.loss)
        trace.append(res.loss)
    worst = int(np.argmax(probe_losses))
    comp = prior.components[worst]

    lo = np.tanh((comp.mu - 3.0 * comp.sigma) / prior.tau)
    hi = np.tanh((comp.mu + 3.0 * comp.sigma) / prior.tau)
    if not rotation:
        lo[2] = hi[2] = 0.0
    bounds = np.stack([lo, hi], axis=1)

    # informed kernel scales: the component's own sigma mapped to theta units
    ls = np.maximum((hi - lo) / 6.0, 1e-6)

    def feasible(theta):
        return check_exclusion(patch, theta, exclusion, image.shape[:2])

    observations = []
    init_pts = sobol_points(bounds, n_init, seed=int(gen.integers(2**31)))
    for theta in init_pts:
        if total >= budget:
            break
        if not feasible(theta):
            continue
        res = oracle.query(compose(image, patch, theta), target)
        total += 1
        trace.append(res.loss)
        observations.append((theta, res.loss))
        if res.success:
            return AttackReport(
                image_id=image_id,
                method="dop-loa",
                success=True,
                queries_used=total,
                total_queries=total,
                final_theta=np.asarray(theta).tolist(),
                loss_trace=trace,
                first_success_query=total,
                metadata={"component": worst},
            )

    seed_rejects = 0
    while not observations and total < budget:
        # every Sobol point was exclusion-blocked: seed from feasible box draws
        theta = gen.uniform(bounds[:, 0], bounds[:, 1])
        if not feasible(theta):
            seed_rejects += 1
            if seed_rejects > 100:
                raise InfeasiblePlacementError(
                    "search box offers no exclusion-respecting placements"
                )
            continue
        res = oracle.query(compose(image, patch, theta), target)
        total += 1
        trace.append(res.loss)
        observations.append((theta, res.loss))

    ys = [loss for _, loss in observations]
    amplitude = max(float(np.var(ys)), 1e-10) if len(ys) > 1 else 1e-10
    gp = GpState(
        lengthscale=ls,
        amplitude=amplitude,
        bounds=bounds,
        noise=1e-6 * max(amplitude, 1.0),
        prior_mean=float(np.mean(ys)) if ys else 0.0,
    )
    for theta, loss in observations:
        gp.add_observation(theta, loss)

    rejects = 0
    while total < budget:
        theta = ucb_next(gp, beta=beta, seed=int(gen.integers(2**31)))
        if not feasible(theta):
            # acquisition landed on forbidden ground: fall back to a feasible
            # box draw so the budget still explores
            theta = gen.uniform(bounds[:, 0], bounds[:, 1])
            if not feasible(theta):
                rejects += 1
                if rejects > 100:
                    raise InfeasiblePlacementError(
                        "search box offers no exclusion-respecting placements"
                    )
                continue
        rejects = 0
        res = oracle.query(compose(image, patch, theta), target)
        total += 1
        trace.append(res.loss)
        if res.success:
            return AttackReport(
                image_id=image_id,
                method="dop-loa",
                success=True,
                queries_used=total,
                total_queries=total,
                final_theta=np.asarray(theta).tolist(),
                loss_trace=trace,
                first_success_query=total,
                metadata={"component": worst},
            )
        gp.add_observation(theta, res.loss)

    return AttackReport(
        image_id=image_id,
        method="dop-loa",
        success=False,
        queries_used=total,
        total_queries=total,
        loss_trace=trace,
        metadata={"component": worst},
    )
