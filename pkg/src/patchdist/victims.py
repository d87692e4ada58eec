"""Small differentiable victims with hand-written backpropagation.

Two model families over flattened [0,1] images: a softmax classifier and
an L2-normalized embedder (cosine identification). Both are tanh MLPs so
every loss is smooth in the input, which keeps finite-difference gradient
checks tight. Training is plain minibatch SGD, deterministic per seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import imageio, rng


class CapabilityError(RuntimeError):
    """Operation requires an in-process differentiable victim."""


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy at `label` and its gradient w.r.t. the logits."""
    p = softmax(logits)
    loss = -float(np.log(max(p[label], 1e-300)))
    grad = p.copy()
    grad[label] -= 1.0
    return loss, grad


class Mlp:
    """Fully-connected tanh network; final layer linear."""

    def __init__(self, sizes: list[int], seed: int = 0, label: str = "mlp.init"):
        gen = rng.stream(seed, label)
        self.sizes = list(sizes)
        self.weights = []
        self.biases = []
        for nin, nout in zip(sizes[:-1], sizes[1:]):
            scale = 1.0 / np.sqrt(nin)
            self.weights.append(gen.normal(0.0, scale, size=(nin, nout)))
            self.biases.append(np.zeros(nout))

    def forward(self, x: np.ndarray):
        """Returns (output, cache). x can be (nin,) or (B, nin)."""
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i != last:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, acts, dout):
        """Gradients of a scalar loss given d(loss)/d(output).

        Returns (dx, dweights, dbiases); handles batched activations.
        """
        dws = [None] * len(self.weights)
        dbs = [None] * len(self.biases)
        grad = dout
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            if i != last:
                grad = grad * (1.0 - acts[i + 1] ** 2)
            a_prev = acts[i]
            if grad.ndim == 1:
                dws[i] = np.outer(a_prev, grad)
                dbs[i] = grad
            else:
                dws[i] = a_prev.T @ grad
                dbs[i] = grad.sum(axis=0)
            grad = grad @ self.weights[i].T
        return grad, dws, dbs

    def params_flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights] + [b.ravel() for b in self.biases])

    def set_params_flat(self, flat: np.ndarray) -> None:
        i = 0
        for w in self.weights:
            w[...] = flat[i : i + w.size].reshape(w.shape)
            i += w.size
        for b in self.biases:
            b[...] = flat[i : i + b.size].reshape(b.shape)
            i += b.size

    def weight_tag(self) -> str:
        digest = hashlib.sha256(self.params_flat().astype("<f8").tobytes()).hexdigest()
        return digest[:12]


@dataclass
class ToyClassifier:
    """MLP classifier over flattened images; C softmax classes."""

    net: Mlp
    input_dims: tuple[int, int, int]
    num_classes: int

    @property
    def task(self) -> str:
        return "classification"

    def _flatten(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=float)
        if image.shape != self.input_dims:
            raise ValueError(f"expected image dims {self.input_dims}, got {image.shape}")
        return image.reshape(-1)

    def logits(self, image: np.ndarray) -> np.ndarray:
        out, _ = self.net.forward(self._flatten(image))
        return out

    def predict(self, image: np.ndarray) -> int:
        return int(np.argmax(self.logits(image)))

    def ce_loss(self, image: np.ndarray, label: int) -> tuple[float, int]:
        logits = self.logits(image)
        loss, _ = softmax_ce(logits, label)
        return loss, int(np.argmax(logits))

    def input_gradient(self, image: np.ndarray, label: int) -> np.ndarray:
        """d(cross-entropy at label)/d(image), shape H x W x C."""
        x = self._flatten(image)
        logits, acts = self.net.forward(x)
        _, dlogits = softmax_ce(logits, label)
        dx, _, _ = self.net.backward(acts, dlogits)
        return dx.reshape(self.input_dims)

    def weight_tag(self) -> str:
        return self.net.weight_tag()


@dataclass
class ToyEmbedder:
    """MLP embedder; outputs a unit-norm D-dim embedding."""

    net: Mlp
    input_dims: tuple[int, int, int]
    embed_dim: int
    prototypes: np.ndarray | None = None  # (D, C) class prototypes from training

    @property
    def task(self) -> str:
        return "identification"

    def _flatten(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=float)
        if image.shape != self.input_dims:
            raise ValueError(f"expected image dims {self.input_dims}, got {image.shape}")
        return image.reshape(-1)

    def embed(self, image: np.ndarray) -> np.ndarray:
        z, _ = self.net.forward(self._flatten(image))
        return z / np.linalg.norm(z)

    def cosine_loss(self, image: np.ndarray, ref_embedding: np.ndarray) -> float:
        return 1.0 - float(self.embed(image) @ ref_embedding)

    def input_gradient(self, image: np.ndarray, ref_embedding: np.ndarray) -> np.ndarray:
        """d(1 - cos(f(x), ref))/d(image) for a fixed unit-norm reference."""
        x = self._flatten(image)
        z, acts = self.net.forward(x)
        norm = np.linalg.norm(z)
        zh = z / norm
        # d(-zh.ref)/dz through the normalization Jacobian (I - zh zh^T)/|z|
        dz = -(ref_embedding - zh * float(zh @ ref_embedding)) / norm
        dx, _, _ = self.net.backward(acts, dz)
        return dx.reshape(self.input_dims)

    def weight_tag(self) -> str:
        return self.net.weight_tag()


class IdentityDatabase:
    """Nearest-neighbor identity lookup over stored unit embeddings."""

    def __init__(self, embeddings: np.ndarray, labels: np.ndarray):
        self.embeddings = np.asarray(embeddings, dtype=float)
        self.labels = np.asarray(labels, dtype=int)

    @classmethod
    def from_images(cls, embedder: ToyEmbedder, images: np.ndarray, labels: np.ndarray):
        embs = np.stack([embedder.embed(img) for img in images])
        return cls(embs, labels)

    def nearest(self, embedding: np.ndarray) -> int:
        return int(self.labels[np.argmax(self.embeddings @ embedding)])

    def save(self, path) -> None:
        imageio.save_float_array(path, self.embeddings, meta={"labels": self.labels.tolist()})

    @classmethod
    def load(cls, path) -> "IdentityDatabase":
        embeddings, meta = imageio.load_float_array(path)
        return cls(embeddings, np.array(meta["labels"], dtype=int))


def loss_grad_wrt_input(victim, image: np.ndarray, target) -> np.ndarray:
    """Analytic d(adversarial loss)/d(input) for an in-process victim."""
    if isinstance(victim, ToyClassifier):
        return victim.input_gradient(image, int(target))
    if isinstance(victim, ToyEmbedder):
        ref = target if isinstance(target, np.ndarray) and target.ndim == 1 else victim.embed(target)
        return victim.input_gradient(image, ref)
    raise CapabilityError(f"gradients require an in-process victim, got {type(victim).__name__}")


def _accuracy_classifier(model: ToyClassifier, images, labels) -> float:
    preds = [model.predict(img) for img in images]
    return float(np.mean(np.array(preds) == labels))


def _accuracy_embedder(model: ToyEmbedder, images, labels) -> float:
    # prototype-nearest classification accuracy
    if model.prototypes is None:
        return float("nan")
    proto = model.prototypes / np.linalg.norm(model.prototypes, axis=0, keepdims=True)
    preds = [int(np.argmax(model.embed(img) @ proto)) for img in images]
    return float(np.mean(np.array(preds) == labels))


def train_toy_victim(
    images: np.ndarray,
    labels: np.ndarray,
    task: str = "classification",
    epochs: int = 20,
    lr: float = 0.1,
    seed: int = 0,
    hidden: tuple[int, ...] = (128, 64),
    embed_dim: int = 16,
    batch_size: int = 32,
    val_fraction: float = 0.2,
    cosine_scale: float = 10.0,
):
    """Train a classifier or embedder; deterministic given the seed.

    Returns (victim, report) where report carries train/validation accuracy.
    Identification training uses normalized class prototypes with a scaled
    cosine softmax, so the embedding space clusters by identity.
    """
    images = np.asarray(images, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if len(images) == 0:
        raise ValueError("empty dataset")
    input_dims = images.shape[1:]
    n_in = int(np.prod(input_dims))
    num_classes = int(labels.max()) + 1

    order_gen = rng.stream(seed, "victim.shuffle")
    n_val = int(round(val_fraction * len(images)))
    perm = order_gen.permutation(len(images))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        train_idx = perm
    x_train = images[train_idx].reshape(len(train_idx), -1)
    y_train = labels[train_idx]

    if task == "classification":
        net = Mlp([n_in, *hidden, num_classes], seed=seed, label="victim.classifier")
        model = ToyClassifier(net=net, input_dims=input_dims, num_classes=num_classes)
        proto = None
    elif task == "identification":
        net = Mlp([n_in, *hidden, embed_dim], seed=seed, label="victim.embedder")
        proto_gen = rng.stream(seed, "victim.prototypes")
        proto = proto_gen.normal(size=(embed_dim, num_classes))
        model = ToyEmbedder(net=net, input_dims=input_dims, embed_dim=embed_dim, prototypes=proto)
    else:
        raise ValueError(f"unknown task {task!r}")

    epoch_gen = rng.stream(seed, "victim.epochs")
    for _ in range(int(epochs)):
        order = epoch_gen.permutation(len(x_train))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            xb, yb = x_train[idx], y_train[idx]
            out, acts = net.forward(xb)
            if task == "classification":
                p = softmax(out)
                dout = p.copy()
                dout[np.arange(len(yb)), yb] -= 1.0
                dout /= len(yb)
            else:
                norms = np.linalg.norm(out, axis=1, keepdims=True)
                zh = out / norms
                pn = np.linalg.norm(proto, axis=0, keepdims=True)
                ph = proto / pn
                logits = cosine_scale * (zh @ ph)
                p = softmax(logits)
                p[np.arange(len(yb)), yb] -= 1.0
                p /= len(yb)
                dzh = cosine_scale * (p @ ph.T)
                dout = (dzh - zh * np.sum(dzh * zh, axis=1, keepdims=True)) / norms
                dph = cosine_scale * (zh.T @ p)
                dproto = (dph - ph * np.sum(dph * ph, axis=0, keepdims=True)) / pn
                proto -= lr * dproto
            _, dws, dbs = net.backward(acts, dout)
            for w, dw in zip(net.weights, dws):
                w -= lr * dw
            for b, db in zip(net.biases, dbs):
                b -= lr * db

    acc_fn = _accuracy_classifier if task == "classification" else _accuracy_embedder
    report = {
        "task": task,
        "epochs": int(epochs),
        "train_accuracy": acc_fn(model, images[train_idx], labels[train_idx]),
        "val_accuracy": acc_fn(model, images[val_idx], labels[val_idx]) if n_val else float("nan"),
        "weight_tag": model.weight_tag(),
    }
    return model, report


# -- checkpoints -------------------------------------------------------------


def save_victim(path, victim) -> None:
    kind = "classifier" if isinstance(victim, ToyClassifier) else "embedder"
    meta = {
        "kind": kind,
        "sizes": victim.net.sizes,
        "input_dims": list(victim.input_dims),
    }
    if kind == "classifier":
        meta["num_classes"] = victim.num_classes
        flat = victim.net.params_flat()
    else:
        meta["embed_dim"] = victim.embed_dim
        meta["has_prototypes"] = victim.prototypes is not None
        flat = victim.net.params_flat()
        if victim.prototypes is not None:
            meta["prototype_shape"] = list(victim.prototypes.shape)
            flat = np.concatenate([flat, victim.prototypes.ravel()])
    imageio.save_float_array(path, flat, meta)


def load_victim(path):
    flat, meta = imageio.load_float_array(path)
    net = Mlp(meta["sizes"], seed=0)
    n = net.params_flat().size
    net.set_params_flat(flat[:n])
    input_dims = tuple(meta["input_dims"])
    if meta["kind"] == "classifier":
        return ToyClassifier(net=net, input_dims=input_dims, num_classes=meta["num_classes"])
    proto = None
    if meta.get("has_prototypes"):
        shape = tuple(meta["prototype_shape"])
        proto = flat[n : n + shape[0] * shape[1]].reshape(shape)
    return ToyEmbedder(net=net, input_dims=input_dims, embed_dim=meta["embed_dim"], prototypes=proto)
