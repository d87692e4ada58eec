"""Uniform query-oracle abstraction over in-process and remote victims.

Attacks only ever see this interface: one loss query per candidate image,
an exact query counter, and a success verdict. In-process classification
succeeds when the predicted class changes; in-process identification when
the nearest-neighbor identity changes. The remote wire protocol returns
loss plus either the predicted class or the cosine similarity; for remote
identification, success is judged client-side by a cosine threshold.
"""

from __future__ import annotations

import base64
import threading
import time
from dataclasses import dataclass

import numpy as np
import requests

from .victims import CapabilityError, IdentityDatabase, ToyClassifier, ToyEmbedder


class TransportError(RuntimeError):
    """Remote oracle unreachable after the configured retries."""

    def __init__(self, message: str, retries: int):
        super().__init__(f"{message} (after {retries} retries)")
        self.retries = retries


@dataclass
class QueryResult:
    loss: float
    success: bool
    predicted: int | None = None
    cosine: float | None = None


class Oracle:
    """Base: counted loss queries against some victim."""

    task: str

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    @property
    def query_count(self) -> int:
        return self._count

    def _bump(self, n: int = 1) -> None:
        with self._lock:
            self._count += n

    def query(self, x_adv: np.ndarray, target) -> QueryResult:
        raise NotImplementedError

    def query_batch(self, xs, target) -> list[QueryResult]:
        return [self.query(x, target) for x in xs]


class ClassifierOracle(Oracle):
    """In-process classification oracle; target is the true class id."""

    task = "classification"

    def __init__(self, victim: ToyClassifier):
        super().__init__()
        self.victim = victim

    def query(self, x_adv, target) -> QueryResult:
        self._bump()
        loss, predicted = self.victim.ce_loss(x_adv, int(target))
        return QueryResult(loss=loss, success=predicted != int(target), predicted=predicted)


class EmbedderOracle(Oracle):
    """In-process identification oracle with nearest-neighbor lookup.

    target is (ref_image, true_identity); the reference embedding is
    cached so repeated queries for one attack cost a single embed.
    """

    task = "identification"

    def __init__(self, victim: ToyEmbedder, database: IdentityDatabase):
        super().__init__()
        self.victim = victim
        self.database = database
        self._ref_cache: dict[int, np.ndarray] = {}

    def _ref_embedding(self, ref_image: np.ndarray) -> np.ndarray:
        key = id(ref_image)
        if key not in self._ref_cache:
            self._ref_cache[key] = self.victim.embed(ref_image)
        return self._ref_cache[key]

    def query(self, x_adv, target) -> QueryResult:
        ref_image, true_id = target
        self._bump()
        emb = self.victim.embed(x_adv)
        ref = self._ref_embedding(ref_image)
        cos = float(emb @ ref)
        predicted = self.database.nearest(emb)
        return QueryResult(
            loss=1.0 - cos, success=predicted != int(true_id), predicted=predicted, cosine=cos
        )


def encode_image_b64(image: np.ndarray) -> str:
    return base64.b64encode(np.asarray(image, dtype="<f4").tobytes()).decode("ascii")


def decode_image_b64(data: str, dims) -> np.ndarray:
    h, w, c = dims
    arr = np.frombuffer(base64.b64decode(data), dtype="<f4")
    if arr.size != h * w * c:
        raise ValueError("image payload size mismatch")
    return arr.reshape(h, w, c).astype(float)


class RemoteOracle(Oracle):
    """Client for the HTTP loss-oracle wire contract.

    POST {url}/loss with {task, image, label | ref_image}; the image is
    base64 little-endian float32 H*W*C. Success for classification is a
    changed prediction; for identification, cosine below
    `cosine_success_threshold` (the verification-threshold convention).
    """

    def __init__(
        self,
        url: str,
        task: str = "classification",
        retries: int = 3,
        timeout: float = 10.0,
        cosine_success_threshold: float = 0.5,
        session: requests.Session | None = None,
    ):
        super().__init__()
        if task not in ("classification", "identification"):
            raise ValueError(f"unknown task {task!r}")
        self.url = url.rstrip("/")
        self.task = task
        self.retries = retries
        self.timeout = timeout
        self.cosine_success_threshold = cosine_success_threshold
        self.session = session or requests.Session()

    def _post(self, payload: dict) -> dict:
        last = None
        for attempt in range(self.retries + 1):
            try:
                resp = self.session.post(f"{self.url}/loss", json=payload, timeout=self.timeout)
            except requests.RequestException as exc:
                last = exc
                time.sleep(min(0.2 * (attempt + 1), 1.0))
                continue
            if resp.status_code >= 500:
                last = RuntimeError(f"server error {resp.status_code}")
                time.sleep(min(0.2 * (attempt + 1), 1.0))
                continue
            if resp.status_code != 200:
                raise ValueError(f"oracle rejected request ({resp.status_code}): {resp.text}")
            return resp.json()
        raise TransportError(f"POST {self.url}/loss failed: {last}", retries=self.retries)

    def metadata(self) -> dict:
        try:
            resp = self.session.get(f"{self.url}/metadata", timeout=self.timeout)
            resp.raise_for_status()
        except requests.RequestException as exc:
            raise TransportError(f"GET {self.url}/metadata failed: {exc}", retries=0)
        return resp.json()

    def query(self, x_adv, target) -> QueryResult:
        if self.task == "classification":
            payload = {
                "task": "classification",
                "image": encode_image_b64(x_adv),
                "label": int(target),
            }
            body = self._post(payload)
            self._bump()
            predicted = int(body["predicted"])
            return QueryResult(
                loss=float(body["loss"]), success=predicted != int(target), predicted=predicted
            )
        ref_image, _true_id = target
        payload = {
            "task": "identification",
            "image": encode_image_b64(x_adv),
            "ref_image": encode_image_b64(ref_image),
        }
        body = self._post(payload)
        self._bump()
        cos = float(body["cosine"])
        return QueryResult(
            loss=float(body["loss"]), success=cos < self.cosine_success_threshold, cosine=cos
        )


def ce_adv_loss(oracle: Oracle, x_adv: np.ndarray, label: int) -> tuple[float, int]:
    """Cross-entropy adversarial loss; returns (loss, predicted class)."""
    if oracle.task != "classification":
        raise CapabilityError("ce_adv_loss requires a classification oracle")
    res = oracle.query(x_adv, int(label))
    return res.loss, res.predicted


def cosine_adv_loss(oracle: Oracle, x_adv: np.ndarray, x_ref: np.ndarray) -> float:
    """1 - cos(f(x_adv), f(x_ref)) through the oracle."""
    if oracle.task != "identification":
        raise CapabilityError("cosine_adv_loss requires an identification oracle")
    res = oracle.query(x_adv, (x_ref, -1))
    return res.loss
