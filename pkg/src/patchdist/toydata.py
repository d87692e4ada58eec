"""Synthetic victims and datasets with planted placement vulnerabilities.

Everything here exists so that attack behavior can be tested against
known geometry: victims whose adversarial placements are controlled
disks in (l_x, l_y) space, and image datasets whose class evidence sits
at known pixel locations so a trained MLP inherits a predictable
weakness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .compose import PatchSpec
from .oracle import Oracle, QueryResult


def checker_patch(size: int = 6, channels: int = 3, low: float = 0.1, high: float = 0.9) -> PatchSpec:
    """High-contrast checkerboard patch with a full mask."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    cells = ((yy // 2 + xx // 2) % 2).astype(float)
    pattern = np.repeat((low + (high - low) * cells)[..., None], channels, axis=2)
    return PatchSpec(pattern=pattern, mask=np.ones((size, size)))


class PlacementBowlVictim:
    """Differentiable victim with a global quadratic bowl in placement space.

    The loss is -curvature * ||placement(x) - center||^2 where the
    placement is recovered from the centroid of the pixel diff against
    the stored clean image, so the gradient flows through every patched
    pixel and pulls placements toward `center` from anywhere on the
    image. Images without any diff score a constant floor loss.
    """

    def __init__(self, clean_image: np.ndarray, center, curvature: float = 1.0):
        self.clean = np.asarray(clean_image, dtype=float)
        self.center = np.asarray(center, dtype=float)[:2]
        self.curvature = float(curvature)

    def loss_and_input_grad(self, x_adv: np.ndarray):
        x_adv = np.asarray(x_adv, dtype=float)
        delta = x_adv - self.clean
        per_pixel = np.abs(delta).sum(axis=2)
        total = per_pixel.sum()
        if total < 1e-12:
            return -4.0 * self.curvature, np.zeros_like(x_adv)
        h, w = per_pixel.shape
        ys, xs = np.mgrid[0:h, 0:w]
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        centroid_x = float((xs * per_pixel).sum() / total)
        centroid_y = float((ys * per_pixel).sum() / total)
        lx = 2.0 * (cx - centroid_x) / w
        ly = 2.0 * (cy - centroid_y) / h
        resid = np.array([lx, ly]) - self.center
        loss = -self.curvature * float(resid @ resid)

        # chain: loss -> (lx, ly) -> centroid -> per-pixel diff mass -> pixels
        d_lx, d_ly = -2.0 * self.curvature * resid
        d_cx = d_lx * (-2.0 / w)
        d_cy = d_ly * (-2.0 / h)
        d_mass = (d_cx * (xs - centroid_x) + d_cy * (ys - centroid_y)) / total
        grad = d_mass[..., None] * np.sign(delta)
        return loss, grad

    def weight_tag(self) -> str:
        return "placement-bowl"


def infer_placement(x_adv: np.ndarray, clean: np.ndarray) -> np.ndarray | None:
    """Recover (l_x, l_y) from the centroid of changed pixels, or None.

    Inverts the translation convention of the affine grid: patch content
    centers at (cx - w*l_x/2, cy - h*l_y/2). Only reliable while the
    patch is fully on-image.
    """
    diff = np.abs(x_adv - clean).sum(axis=2)
    total = diff.sum()
    if total < 1e-9:
        return None
    h, w = diff.shape
    ys, xs = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    centroid_x = float((xs * diff).sum() / total)
    centroid_y = float((ys * diff).sum() / total)
    return np.array([2.0 * (cx - centroid_x) / w, 2.0 * (cy - centroid_y) / h])


@dataclass
class PlantedSite:
    center: np.ndarray          # (2,) in (l_x, l_y) space
    radius: float               # success disk radius
    amplitude: float = 2.0      # loss bump height (cross-entropy-like scale)
    smooth: float = 0.3         # bump length scale
    fools: bool = True          # decoy sites give signal but never succeed

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)


class PlantedLocationOracle(Oracle):
    """Black-box classification oracle fooled inside planted disks.

    The oracle sees only images. It recovers the patch placement from the
    pixel diff against its stored clean image, reports a smooth loss bump
    around each site (so query-efficient attacks have signal to follow)
    and flips its prediction exactly inside `fools` disks. Loss magnitudes
    default to the small-cross-entropy regime of a confident classifier.
    """

    task = "classification"

    def __init__(
        self,
        clean_image: np.ndarray,
        sites: list[PlantedSite],
        base_loss: float = 0.1,
        true_label: int = 0,
        fooled_label: int = 1,
    ):
        super().__init__()
        self.clean = np.asarray(clean_image, dtype=float)
        self.sites = sites
        self.base_loss = float(base_loss)
        self.true_label = int(true_label)
        self.fooled_label = int(fooled_label)

    def landscape(self, placement: np.ndarray | None) -> tuple[float, bool]:
        if placement is None:
            return self.base_loss, False
        loss = self.base_loss
        fooled = False
        for site in self.sites:
            d2 = float(np.sum((placement - site.center) ** 2))
            loss += site.amplitude * np.exp(-d2 / (2.0 * site.smooth**2))
            if site.fools and d2 <= site.radius**2:
                fooled = True
        return loss, fooled

    def query(self, x_adv, target) -> QueryResult:
        self._bump()
        placement = infer_placement(x_adv, self.clean)
        loss, fooled = self.landscape(placement)
        predicted = self.fooled_label if fooled else self.true_label
        success = predicted != int(target)
        if fooled:
            loss = loss + 4.0  # fooled queries report a high cross-entropy
        return QueryResult(loss=float(loss), success=success, predicted=predicted)


def make_signature_dataset(
    n: int,
    seed: int,
    dims: tuple[int, int, int] = (32, 32, 3),
    num_classes: int = 4,
    blob: int = 8,
    primary_strength: float = 0.85,
    backup_strength: float = 0.35,
    noise: float = 0.04,
):
    """Images whose class evidence is a bright blob at a class-specific spot.

    Each class c lights a primary blob at `primary_positions[c]` and a
    fainter backup blob at the mirrored position. A standard-trained
    classifier leans on the primary blob, so occluding it with a patch is
    a planted vulnerability; the backup blob leaves robust training room
    to recover. Returns (images, labels, info) where info carries the blob
    geometry, including each class's primary blob center in placement
    coordinates.
    """
    h, w, c = dims
    gen = rng.stream(seed, "toydata.signature")
    quarter_h, quarter_w = h // 4, w // 4
    primary = []
    for cls in range(num_classes):
        row = quarter_h + (cls % 2) * quarter_h - blob // 2
        col = quarter_w + (cls // 2) * quarter_w - blob // 2
        primary.append((row, col))
    backup = [(h - blob - r, w - blob - col) for r, col in primary]

    labels = gen.integers(0, num_classes, size=n)
    images = gen.uniform(0.15, 0.45, size=(n, h, w, c))
    for i, lab in enumerate(labels):
        r0, c0 = primary[lab]
        images[i, r0 : r0 + blob, c0 : c0 + blob] += primary_strength
        r1, c1 = backup[lab]
        images[i, r1 : r1 + blob, c1 : c1 + blob] += backup_strength
    images = np.clip(images + gen.normal(0.0, noise, size=images.shape), 0.0, 1.0)

    def to_placement(row, col):
        # blob center in pixels -> (l_x, l_y) that parks the patch on it
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        bx, by = col + blob / 2.0 - 0.5, row + blob / 2.0 - 0.5
        return np.array([2.0 * (cx - bx) / w, 2.0 * (cy - by) / h])

    info = {
        "primary": primary,
        "backup": backup,
        "blob": blob,
        "primary_placements": [to_placement(r, c) for r, c in primary],
    }
    return images, labels, info
