"""Stage one: white-box optimization of the placement distribution.

A small mapping network turns a clean image into the mixture parameters
{mu_k, sigma_k} of its placement prior (component weights stay fixed at
1/K in this stage). The training objective is the Monte-Carlo estimate

    J = mean_q[ L_adv(compose(X, P, theta_q)) ] + lambda * mean_q[ L_entropy,q ]

ascended in the network weights; the entropy bonus keeps the prior from
collapsing onto a single placement. Gradients flow analytically through
the victim's input gradient, the compositing Jacobian, the tanh squash
and the reparameterization.

`direct_optimize` runs the same ascent on raw per-image parameters
instead of network weights. Both parameterize sigma through a softplus,
so the optimization itself is unconstrained.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .compose import PatchSpec, compose, compose_vjp, effective_theta
from .mixture import (
    MixtureParams,
    ValidationError,
    entropy_grads,
    entropy_loss,
    reparam_sample,
    sample_component,
    uniform_mixture,
)
from .victims import CapabilityError, Mlp, ToyClassifier, ToyEmbedder

SIGMA_INIT_FRACTION = 0.3  # initial sigma/tau; ~0.15 of the theta range after squash


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    return y + np.log(-np.expm1(-y)) if np.ndim(y) == 0 else np.asarray(y) + np.log(-np.expm1(-np.asarray(y)))


def pool_gray(image: np.ndarray, out: int = 8) -> np.ndarray:
    """Average-pool the grayscale image onto an out x out grid."""
    image = np.asarray(image, dtype=float)
    gray = image.mean(axis=2)
    h, w = gray.shape
    ys = np.linspace(0, h, out + 1).astype(int)
    xs = np.linspace(0, w, out + 1).astype(int)
    pooled = np.empty((out, out))
    for i in range(out):
        for j in range(out):
            pooled[i, j] = gray[ys[i] : ys[i + 1], xs[j] : xs[j + 1]].mean()
    return pooled


class MappingNetwork:
    """Encoder MLP plus mu/sigma heads producing K placement components.

    Head outputs are scaled by tau so that order-one network outputs map
    onto the useful range of the squash; sigma passes through a softplus
    and starts near SIGMA_INIT_FRACTION * tau.
    """

    def __init__(
        self,
        k: int = 5,
        tau: float = 3000.0,
        pool: int = 8,
        hidden: tuple[int, int] = (48, 32),
        seed: int = 0,
    ):
        self.k = int(k)
        self.tau = float(tau)
        self.pool = int(pool)
        self.encoder = Mlp([pool * pool, *hidden], seed=seed, label="mapping.encoder")
        gen = rng.stream(seed, "mapping.heads")
        feat = hidden[-1]
        scale = 0.1 / math.sqrt(feat)
        self.w_mu = gen.normal(0.0, scale, size=(feat, self.k * 3))
        self.b_mu = np.zeros(self.k * 3)
        self.w_sigma = gen.normal(0.0, scale, size=(feat, self.k * 3))
        self.b_sigma = np.full(self.k * 3, float(inv_softplus(SIGMA_INIT_FRACTION)))

    # -- forward / backward ------------------------------------------------

    def forward(self, image: np.ndarray):
        """Returns (mu (K,3), sigma (K,3), cache)."""
        x = pool_gray(image, self.pool).reshape(-1)
        feat, acts = self.encoder.forward(x)
        mu_raw = feat @ self.w_mu + self.b_mu
        s_raw = feat @ self.w_sigma + self.b_sigma
        mu = self.tau * mu_raw.reshape(self.k, 3)
        sigma = self.tau * softplus(s_raw).reshape(self.k, 3)
        cache = (acts, feat, s_raw)
        return mu, sigma, cache

    def backward(self, cache, dmu: np.ndarray, dsigma: np.ndarray) -> np.ndarray:
        """Flat gradient of a scalar w.r.t. all weights, given d/dmu, d/dsigma."""
        acts, feat, s_raw = cache
        dmu_raw = self.tau * dmu.reshape(-1)
        ds_raw = self.tau * (1.0 / (1.0 + np.exp(-s_raw))) * dsigma.reshape(-1)
        dw_mu = np.outer(feat, dmu_raw)
        db_mu = dmu_raw
        dw_sigma = np.outer(feat, ds_raw)
        db_sigma = ds_raw
        dfeat = self.w_mu @ dmu_raw + self.w_sigma @ ds_raw
        _, enc_dws, enc_dbs = self.encoder.backward(acts, dfeat)
        return np.concatenate(
            [dw.ravel() for dw in enc_dws]
            + [db.ravel() for db in enc_dbs]
            + [dw_mu.ravel(), db_mu, dw_sigma.ravel(), db_sigma]
        )

    # -- parameter vector ----------------------------------------------------

    def params_flat(self) -> np.ndarray:
        return np.concatenate(
            [w.ravel() for w in self.encoder.weights]
            + [b.ravel() for b in self.encoder.biases]
            + [self.w_mu.ravel(), self.b_mu, self.w_sigma.ravel(), self.b_sigma]
        )

    def set_params_flat(self, flat: np.ndarray) -> None:
        n_enc = self.encoder.params_flat().size
        self.encoder.set_params_flat(flat[:n_enc])
        i = n_enc
        for arr in (self.w_mu, self.b_mu, self.w_sigma, self.b_sigma):
            arr[...] = flat[i : i + arr.size].reshape(arr.shape)
            i += arr.size

    def weight_tag(self) -> str:
        import hashlib

        return hashlib.sha256(self.params_flat().astype("<f8").tobytes()).hexdigest()[:12]


def map_distribution(net: MappingNetwork, image: np.ndarray) -> MixtureParams:
    """Image -> mixture prior with weights fixed at 1/K."""
    mu, sigma, _ = net.forward(image)
    return uniform_mixture(mu, sigma, tau=net.tau)


# -- surrogate loss dispatch ---------------------------------------------------


def surrogate_loss_and_grad(surrogate, x_adv: np.ndarray, target):
    """(loss, d loss/d x_adv) for any in-process differentiable victim.

    Classifiers take an integer label, embedders a unit reference
    embedding; any other object must expose loss_and_input_grad(x).
    """
    if isinstance(surrogate, ToyClassifier):
        loss, _ = surrogate.ce_loss(x_adv, int(target))
        return loss, surrogate.input_gradient(x_adv, int(target))
    if isinstance(surrogate, ToyEmbedder):
        return (
            surrogate.cosine_loss(x_adv, target),
            surrogate.input_gradient(x_adv, target),
        )
    if hasattr(surrogate, "loss_and_input_grad"):
        return surrogate.loss_and_input_grad(x_adv)
    raise CapabilityError(
        f"white-box stage needs an in-process differentiable victim, got {type(surrogate).__name__}"
    )


def surrogate_target(surrogate, image: np.ndarray, label):
    """Resolve the adversarial-loss target for a surrogate and clean image."""
    if isinstance(surrogate, ToyEmbedder):
        return surrogate.embed(image)
    return label


@dataclass
class ObjectiveResult:
    loss: float
    grad: np.ndarray | None
    mean_adv: float
    mean_entropy: float
    draws: list


def _draw_list(psi: MixtureParams, q: int, gen: np.random.Generator) -> list:
    return [(sample_component(psi, gen), gen.standard_normal(3)) for _ in range(q)]


def _per_draw_theta_grads(psi, gamma, r, image, patch, target, surrogate, rotation):
    """Shared core: one draw's adversarial loss and its (dmu, dsigma)."""
    sample = reparam_sample(psi, gamma, r)
    k = sample.component
    theta = effective_theta(sample.theta, rotation)
    x_adv = compose(image, patch, theta)
    loss_adv, g_x = surrogate_loss_and_grad(surrogate, x_adv, target)
    dl_dtheta = compose_vjp(image, patch, theta, g_x)
    if not rotation:
        dl_dtheta[2] = 0.0
    t = np.tanh(sample.u / psi.tau)
    dl_du = dl_dtheta * (1.0 - t * t) / psi.tau
    dmu = np.zeros((psi.k, 3))
    dsigma = np.zeros((psi.k, 3))
    dmu[k] = dl_du
    dsigma[k] = dl_du * r
    return loss_adv, dmu, dsigma


def dopatch_objective(
    net: MappingNetwork,
    image: np.ndarray,
    label,
    surrogate,
    patch: PatchSpec,
    q: int = 5,
    lam: float = 0.1,
    seed: int | None = None,
    draws: list | None = None,
    rotation: bool = True,
    gen: np.random.Generator | None = None,
) -> ObjectiveResult:
    """Monte-Carlo objective and its analytic gradient over network weights.

    `draws` freezes the (Gamma, r) pairs for gradient checking; otherwise
    they come from `gen` or from stream(seed, "prior.mc").
    """
    mu, sigma, cache = net.forward(image)
    psi = uniform_mixture(mu, sigma, tau=net.tau)
    if draws is None:
        if gen is None:
            gen = rng.stream(0 if seed is None else seed, "prior.mc")
        draws = _draw_list(psi, q, gen)
    target = surrogate_target(surrogate, image, label)

    total_adv, total_ent = 0.0, 0.0
    dmu_acc = np.zeros((net.k, 3))
    dsigma_acc = np.zeros((net.k, 3))
    for gamma, r in draws:
        loss_adv, dmu, dsigma = _per_draw_theta_grads(
            psi, gamma, r, image, patch, target, surrogate, rotation
        )
        ent = entropy_loss(psi, gamma, r)
        dmu_ent, dsigma_ent = entropy_grads(psi, gamma, r)
        total_adv += loss_adv
        total_ent += ent
        dmu_acc += dmu + lam * dmu_ent
        dsigma_acc += dsigma + lam * dsigma_ent
    n = len(draws)
    dmu_acc /= n
    dsigma_acc /= n
    grad = net.backward(cache, dmu_acc, dsigma_acc)
    loss = total_adv / n + lam * total_ent / n
    return ObjectiveResult(
        loss=loss, grad=grad, mean_adv=total_adv / n, mean_entropy=total_ent / n, draws=draws
    )


@dataclass
class PriorRecord:
    image_id: str
    psi: MixtureParams
    surrogate_tag: str
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "psi": self.psi.to_dict(),
            "surrogate_tag": self.surrogate_tag,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PriorRecord":
        return cls(
            image_id=d["image_id"],
            psi=MixtureParams.from_dict(d["psi"]),
            surrogate_tag=d["surrogate_tag"],
            metadata=d.get("metadata", {}),
        )


def train_prior(
    net: MappingNetwork,
    images: np.ndarray,
    labels,
    surrogate,
    patch: PatchSpec,
    epochs: int = 100,
    lr: float = 0.01,
    decay_every: int = 150,
    decay_factor: float = 0.2,
    q: int = 5,
    lam: float = 0.1,
    seed: int = 0,
    rotation: bool = True,
    image_ids: list[str] | None = None,
) -> tuple[MappingNetwork, list[PriorRecord], dict]:
    """Gradient-ascent training of the mapping network over a dataset.

    Returns the trained network, per-image priors from the final weights,
    and per-epoch mean adversarial / entropy loss traces.
    """
    images = np.asarray(images, dtype=float)
    if len(images) == 0:
        raise ValueError("empty dataset")
    if image_ids is None:
        image_ids = [f"img_{i:05d}" for i in range(len(images))]
    labels = list(labels) if labels is not None else [None] * len(images)

    trace = {"mean_adv": [], "mean_entropy": []}
    gen = rng.stream(seed, "prior.train")
    current_lr = lr
    for epoch in range(int(epochs)):
        if epoch > 0 and decay_every > 0 and epoch % decay_every == 0:
            current_lr *= decay_factor
        adv_sum, ent_sum = 0.0, 0.0
        for i, image in enumerate(images):
            try:
                res = dopatch_objective(
                    net, image, labels[i], surrogate, patch, q=q, lam=lam, rotation=rotation, gen=gen
                )
            except (ValidationError, FloatingPointError) as exc:
                raise FloatingPointError(
                    f"training diverged at epoch {epoch}, image {i}: {exc}; "
                    f"trace so far: {trace['mean_adv']}"
                ) from exc
            if not np.isfinite(res.loss) or not np.isfinite(res.grad).all():
                raise FloatingPointError(
                    f"training diverged at epoch {epoch}, image {i}: loss={res.loss}; "
                    f"trace so far: {trace['mean_adv']}"
                )
            net.set_params_flat(net.params_flat() + current_lr * res.grad)
            adv_sum += res.mean_adv
            ent_sum += res.mean_entropy
        trace["mean_adv"].append(adv_sum / len(images))
        trace["mean_entropy"].append(ent_sum / len(images))

    tag = getattr(surrogate, "weight_tag", lambda: "external")()
    records = [
        PriorRecord(
            image_id=image_ids[i],
            psi=map_distribution(net, images[i]),
            surrogate_tag=tag,
            metadata={"epochs": int(epochs), "lambda": lam, "q": q, "final_lr": current_lr},
        )
        for i in range(len(images))
    ]
    return net, records, trace


def direct_optimize(
    psi0: MixtureParams,
    image: np.ndarray,
    label,
    surrogate,
    patch: PatchSpec,
    iters: int = 100,
    lr: float = 0.01,
    q: int = 5,
    lam: float = 0.1,
    seed: int = 0,
    rotation: bool = True,
) -> MixtureParams:
    """Ascend {mu_k, sigma_k} of a single prior directly (weights stay 1/K).

    Internally optimizes mu/tau and inv_softplus(sigma/tau) so the learning
    rate is on the same scale as network training.
    """
    tau = psi0.tau
    k = psi0.k
    m = psi0.mus / tau
    s = inv_softplus(psi0.sigmas / tau)
    target = surrogate_target(surrogate, image, label)
    gen = rng.stream(seed, "prior.direct")
    for _ in range(int(iters)):
        mu = tau * m
        sigma = tau * softplus(s)
        try:
            psi = uniform_mixture(mu, sigma, tau=tau)
        except ValidationError as exc:
            raise FloatingPointError(f"direct optimization diverged: {exc}") from exc
        draws = _draw_list(psi, q, gen)
        dmu_acc = np.zeros((k, 3))
        dsigma_acc = np.zeros((k, 3))
        for gamma, r in draws:
            loss_adv, dmu, dsigma = _per_draw_theta_grads(
                psi, gamma, r, image, patch, target, surrogate, rotation
            )
            dmu_ent, dsigma_ent = entropy_grads(psi, gamma, r)
            dmu_acc += dmu + lam * dmu_ent
            dsigma_acc += dsigma + lam * dsigma_ent
        dmu_acc /= len(draws)
        dsigma_acc /= len(draws)
        if not (np.isfinite(dmu_acc).all() and np.isfinite(dsigma_acc).all()):
            raise FloatingPointError("direct optimization diverged")
        m = m + lr * tau * dmu_acc
        s = s + lr * tau * (1.0 / (1.0 + np.exp(-s))) * dsigma_acc
    return uniform_mixture(tau * m, tau * softplus(s), tau=tau)


# -- prior-set persistence ----------------------------------------------------


def save_prior_set(directory, records: list[PriorRecord], extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for rec in records:
        (directory / f"{rec.image_id}.prior.json").write_text(json.dumps(rec.to_dict(), indent=2))
    manifest = {
        "image_ids": [r.image_id for r in records],
        "surrogate_tag": records[0].surrogate_tag if records else None,
        **(extra or {}),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_prior_set(directory) -> list[PriorRecord]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    return [
        PriorRecord.from_dict(json.loads((directory / f"{iid}.prior.json").read_text()))
        for iid in manifest["image_ids"]
    ]
