"""Standalone victim-checkpoint loader and forward pass.

Reads the raw-float32 checkpoint format (one JSON header line with shape
and architecture metadata, then little-endian float32 weights) and
evaluates the tanh MLP it describes. Deliberately self-contained: the
service depends only on the checkpoint file contract, not on the
attacking library.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

RAW_MAGIC = "patchdist-raw-v1"


def _read_checkpoint(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("magic") != RAW_MAGIC:
            raise ValueError(f"{path}: not a raw checkpoint")
        payload = np.frombuffer(fh.read(), dtype="<f4")
    shape = tuple(header.pop("shape"))
    return payload.reshape(shape).astype(np.float64), header


@dataclass
class VictimModel:
    kind: str                      # "classifier" | "embedder"
    sizes: list[int]
    input_dims: tuple[int, int, int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    num_classes: int | None = None
    embed_dim: int | None = None
    tag: str = ""

    @classmethod
    def load(cls, path) -> "VictimModel":
        flat, meta = _read_checkpoint(path)
        sizes = meta["sizes"]
        weights, biases = [], []
        i = 0
        for nin, nout in zip(sizes[:-1], sizes[1:]):
            weights.append(flat[i : i + nin * nout].reshape(nin, nout))
            i += nin * nout
        for nout in sizes[1:]:
            biases.append(flat[i : i + nout])
            i += nout
        tag = hashlib.sha256(flat[:i].astype("<f4").tobytes()).hexdigest()[:12]
        return cls(
            kind=meta["kind"],
            sizes=sizes,
            input_dims=tuple(meta["input_dims"]),
            weights=weights,
            biases=biases,
            num_classes=meta.get("num_classes"),
            embed_dim=meta.get("embed_dim"),
            tag=tag,
        )

    def _forward(self, image: np.ndarray) -> np.ndarray:
        h = image.reshape(-1)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i != last:
                h = np.tanh(h)
        return h

    def check_image(self, image: np.ndarray) -> None:
        if image.shape != self.input_dims:
            raise ValueError(
                f"image dims {list(image.shape)} do not match model input {list(self.input_dims)}"
            )

    def classification_loss(self, image: np.ndarray, label: int) -> tuple[float, int]:
        """Softmax cross-entropy at the label, plus the predicted class."""
        if self.kind != "classifier":
            raise ValueError("checkpoint is not a classifier")
        if not 0 <= label < self.num_classes:
            raise ValueError(f"label {label} outside [0, {self.num_classes})")
        logits = self._forward(image)
        z = logits - logits.max()
        log_probs = z - math.log(np.exp(z).sum())
        return -float(log_probs[label]), int(np.argmax(logits))

    def logits(self, image: np.ndarray) -> np.ndarray:
        return self._forward(image)

    def embed(self, image: np.ndarray) -> np.ndarray:
        if self.kind != "embedder":
            raise ValueError("checkpoint is not an embedder")
        z = self._forward(image)
        return z / np.linalg.norm(z)

    def identification_loss(self, image: np.ndarray, ref_image: np.ndarray) -> tuple[float, float]:
        """1 - cosine similarity between the two embeddings, plus the cosine."""
        cos = float(self.embed(image) @ self.embed(ref_image))
        return 1.0 - cos, cos
