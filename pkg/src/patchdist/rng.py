"""Deterministic random streams derived from a single run seed.

Every stochastic component draws from its own labelled stream so that a
run is replayable end to end from one 64-bit seed, and adding draws in
one component never perturbs another.
"""

import hashlib

import numpy as np


def _label_entropy(label: str) -> list[int]:
    # Stable across processes/platforms (unlike hash()).
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 8], "little") for i in range(0, 32, 8)]


def stream(seed: int, label: str) -> np.random.Generator:
    """Return a Generator for `label`, fully determined by (seed, label)."""
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence([int(seed), *_label_entropy(label)])
    return np.random.Generator(np.random.PCG64(ss))


def substream(seed: int, label: str, index: int) -> np.random.Generator:
    """Indexed variant of `stream`, for per-image / per-restart streams."""
    return stream(seed, f"{label}#{int(index)}")
