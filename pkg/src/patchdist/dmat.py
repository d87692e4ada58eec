"""Distributional adversarial training: min-max over placement priors.

Each minibatch alternates one inner ascent step of the mapping network
(seeking the worst-case placement distribution against the current
victim) with one outer descent step of the victim on a 1:1 mix of clean
and adversarially patched samples, labelled with their true classes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imageio, rng
from .compose import PatchSpec, compose, effective_theta
from .mixture import draw_sample
from .prior import MappingNetwork, dopatch_objective, map_distribution
from .victims import Mlp, ToyClassifier, softmax


@dataclass
class DmatConfig:
    epochs: int = 150
    k: int = 5
    q: int = 5
    lam: float = 0.1
    inner_lr: float = 0.01
    outer_lr: float = 0.001
    batch_size: int = 16
    seed: int = 0
    rotation: bool = True
    inner_steps: int = 1
    hidden: tuple[int, ...] = (128, 64)
    net_hidden: tuple[int, int] = (48, 32)
    tau: float = 3000.0

    def __post_init__(self):
        if self.inner_lr <= 0 or self.outer_lr < 0:
            raise ValueError("learning rates must be positive (outer may be zero)")
        if self.k < 1:
            raise ValueError("k must be at least 1")


def random_placement_augmenter(
    images: np.ndarray, patch: PatchSpec, gen: np.random.Generator, rotation: bool = True
) -> np.ndarray:
    """Baseline augmenter: uniformly random placements (no distribution)."""
    out = np.empty_like(images)
    for i, img in enumerate(images):
        theta = gen.uniform(-1.0, 1.0, size=3)
        out[i] = compose(img, patch, effective_theta(theta, rotation))
    return out


def _ce_descent_step(victim: ToyClassifier, xb: np.ndarray, yb: np.ndarray, lr: float) -> float:
    """One SGD step on batched softmax cross-entropy; returns mean loss."""
    flat = xb.reshape(len(xb), -1)
    out, acts = victim.net.forward(flat)
    p = softmax(out)
    idx = np.arange(len(yb))
    loss = float(np.mean(-np.log(np.maximum(p[idx, yb], 1e-300))))
    dout = p
    dout[idx, yb] -= 1.0
    dout /= len(yb)
    _, dws, dbs = victim.net.backward(acts, dout)
    if lr:
        for w, dw in zip(victim.net.weights, dws):
            w -= lr * dw
        for b, db in zip(victim.net.biases, dbs):
            b -= lr * db
    return loss


def dmat_epoch(
    victim: ToyClassifier,
    net: MappingNetwork,
    batch_images: np.ndarray,
    batch_labels: np.ndarray,
    patch: PatchSpec,
    cfg: DmatConfig,
    gen: np.random.Generator,
) -> dict:
    """One inner-maximization / outer-minimization cycle on a minibatch."""
    inner_adv = inner_ent = 0.0
    for _ in range(cfg.inner_steps):
        grad_sum = np.zeros_like(net.params_flat())
        inner_adv = inner_ent = 0.0
        for img, lab in zip(batch_images, batch_labels):
            res = dopatch_objective(
                net, img, int(lab), victim, patch,
                q=cfg.q, lam=cfg.lam, rotation=cfg.rotation, gen=gen,
            )
            if not np.isfinite(res.loss) or not np.isfinite(res.grad).all():
                raise FloatingPointError("inner maximization diverged")
            grad_sum += res.grad
            inner_adv += res.mean_adv
            inner_ent += res.mean_entropy
        net.set_params_flat(net.params_flat() + cfg.inner_lr * grad_sum / len(batch_images))
        inner_adv /= len(batch_images)
        inner_ent /= len(batch_images)

    adv_batch = np.empty_like(batch_images)
    for i, img in enumerate(batch_images):
        psi = map_distribution(net, img)
        sample = draw_sample(psi, gen)
        adv_batch[i] = compose(img, patch, effective_theta(sample.theta, cfg.rotation))

    mixed_x = np.concatenate([adv_batch, batch_images])
    mixed_y = np.concatenate([batch_labels, batch_labels]).astype(int)
    outer_loss = _ce_descent_step(victim, mixed_x, mixed_y, cfg.outer_lr)
    if not np.isfinite(outer_loss) or not all(
        np.isfinite(w).all() for w in victim.net.weights
    ):
        raise FloatingPointError("outer minimization diverged")
    return {"inner_adv": inner_adv, "inner_entropy": inner_ent, "outer_loss": outer_loss}


def dmat_train(
    images: np.ndarray,
    labels: np.ndarray,
    patch: PatchSpec,
    cfg: DmatConfig | None = None,
    victim: ToyClassifier | None = None,
    net: MappingNetwork | None = None,
) -> tuple[ToyClassifier, MappingNetwork, dict]:
    """Run the full alternating training; returns (victim, net, report).

    The victim and mapping network start from scratch by default (pass
    them in to warm-start either side).
    """
    cfg = cfg or DmatConfig()
    images = np.asarray(images, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if len(images) == 0:
        raise ValueError("empty dataset")
    input_dims = images.shape[1:]
    num_classes = int(labels.max()) + 1
    if victim is None:
        mlp = Mlp(
            [int(np.prod(input_dims)), *cfg.hidden, num_classes],
            seed=cfg.seed,
            label="victim.classifier",
        )
        victim = ToyClassifier(net=mlp, input_dims=input_dims, num_classes=num_classes)
    if net is None:
        net = MappingNetwork(k=cfg.k, tau=cfg.tau, hidden=cfg.net_hidden, seed=cfg.seed)

    gen = rng.stream(cfg.seed, "dmat.train")
    report = {"epochs": [], "config": {"k": cfg.k, "q": cfg.q, "lam": cfg.lam,
                                       "inner_lr": cfg.inner_lr, "outer_lr": cfg.outer_lr,
                                       "epochs": cfg.epochs, "seed": cfg.seed}}
    for epoch in range(int(cfg.epochs)):
        order = gen.permutation(len(images))
        metrics = {"inner_adv": 0.0, "inner_entropy": 0.0, "outer_loss": 0.0}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            m = dmat_epoch(victim, net, images[idx], labels[idx], patch, cfg, gen)
            for key in metrics:
                metrics[key] += m[key]
            n_batches += 1
        for key in metrics:
            metrics[key] /= n_batches
        preds = np.array([victim.predict(img) for img in images])
        metrics["clean_accuracy"] = float(np.mean(preds == labels))
        metrics["epoch"] = epoch
        report["epochs"].append(metrics)
    return victim, net, report


def save_dmat_checkpoint(directory, victim: ToyClassifier, net: MappingNetwork, report: dict) -> None:
    from .victims import save_victim

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_victim(directory / "victim.bin", victim)
    imageio.save_float_array(
        directory / "mapping_net.bin",
        net.params_flat(),
        meta={"k": net.k, "tau": net.tau, "pool": net.pool,
              "hidden": list(net.encoder.sizes[1:])},
    )
    (directory / "report.json").write_text(json.dumps(report, indent=2))


def load_dmat_checkpoint(directory) -> tuple[ToyClassifier, MappingNetwork, dict]:
    from .victims import load_victim

    directory = Path(directory)
    victim = load_victim(directory / "victim.bin")
    flat, meta = imageio.load_float_array(directory / "mapping_net.bin")
    net = MappingNetwork(
        k=meta["k"], tau=meta["tau"], pool=meta["pool"], hidden=tuple(meta["hidden"])
    )
    net.set_params_flat(flat)
    report = json.loads((directory / "report.json").read_text())
    return victim, net, report
