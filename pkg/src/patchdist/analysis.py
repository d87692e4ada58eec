"""Exhaustive placement traversal and density analysis of adversarial spots.

Mirrors the exploratory methodology behind the placement priors at desk
scale: walk every grid placement against an oracle, estimate the density
of the successful ones with a Gaussian KDE, and compare densities across
victims via histogram intersection.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import imageio
from .compose import PatchSpec, check_exclusion, compose
from .oracle import Oracle


def grid_traverse(
    image: np.ndarray,
    patch: PatchSpec,
    oracle: Oracle,
    target,
    stride: int = 1,
    rotations: tuple[float, ...] = (0.0,),
    exclusion: np.ndarray | None = None,
) -> tuple[list[np.ndarray], int]:
    """Query every grid placement; return (adversarial thetas, query count).

    The translation grid steps `stride` pixels per axis over the full
    placement range; each rotation in `rotations` (phi units in [-1, 1])
    multiplies the grid. Placements whose footprint hits the exclusion
    mask are skipped without a query.
    """
    if stride < 1:
        raise ValueError("stride must be at least one pixel")
    h, w = image.shape[:2]
    # one grid step = stride pixels of translation: delta l = 2 * stride / extent
    lxs = np.arange(-1.0, 1.0 + 1e-12, 2.0 * stride / w)
    lys = np.arange(-1.0, 1.0 + 1e-12, 2.0 * stride / h)
    adversarial = []
    queries = 0
    for phi in rotations:
        for ly in lys:
            for lx in lxs:
                theta = np.array([lx, ly, phi])
                if not check_exclusion(patch, theta, exclusion, (h, w)):
                    continue
                res = oracle.query(compose(image, patch, theta), target)
                queries += 1
                if res.success:
                    adversarial.append(theta)
    return adversarial, queries


@dataclass
class DensityGrid:
    values: np.ndarray   # (res, res), rows indexed by l_y, columns by l_x
    xs: np.ndarray       # (res,) l_x grid centers
    ys: np.ndarray       # (res,) l_y grid centers

    @property
    def cell_area(self) -> float:
        return float((self.xs[1] - self.xs[0]) * (self.ys[1] - self.ys[0]))

    def mass(self) -> float:
        return float(self.values.sum() * self.cell_area)

    def marginals(self) -> tuple[np.ndarray, np.ndarray]:
        """p(l_x) and p(l_y) by integrating out the other axis."""
        dx = float(self.xs[1] - self.xs[0])
        dy = float(self.ys[1] - self.ys[0])
        return self.values.sum(axis=0) * dy, self.values.sum(axis=1) * dx


def scott_bandwidth(points: np.ndarray) -> np.ndarray:
    """Scott's rule per dimension, floored for degenerate point sets."""
    n, d = points.shape
    spread = points.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
    bw = spread * n ** (-1.0 / (d + 4))
    return np.maximum(bw, 0.02)


def kde_density(
    points,
    bandwidth: float | np.ndarray | None = None,
    grid_resolution: int = 64,
) -> DensityGrid:
    """Gaussian-product KDE of placements on a regular grid over [-1,1]^2.

    Accepts (l_x, l_y) pairs or full theta triples (rotation dropped).
    Bandwidth defaults to Scott's rule on the point set. The returned
    values are the raw KDE; mass escaping the grid domain is not folded
    back, so the grid integral is 1 only up to boundary leakage.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.size == 0:
        raise ValueError("kde_density needs at least one point")
    points = points[:, :2]
    if bandwidth is None:
        bw = scott_bandwidth(points)
    else:
        bw = np.broadcast_to(np.atleast_1d(np.asarray(bandwidth, dtype=float)), (2,)).copy()
    if np.any(bw <= 0):
        raise ValueError("bandwidth must be positive")

    centers = np.linspace(-1.0 + 1.0 / grid_resolution, 1.0 - 1.0 / grid_resolution, grid_resolution)
    gx = centers[None, :, None]  # broadcast over (ys, xs, points)
    gy = centers[:, None, None]
    px = points[:, 0][None, None, :]
    py = points[:, 1][None, None, :]
    kern = np.exp(
        -0.5 * (((gx - px) / bw[0]) ** 2 + ((gy - py) / bw[1]) ** 2)
    )
    values = kern.sum(axis=2) / (len(points) * 2.0 * math.pi * bw[0] * bw[1])
    return DensityGrid(values=values, xs=centers, ys=centers)


def density_overlap(d1: DensityGrid, d2: DensityGrid) -> float:
    """Histogram intersection of two densities on identical grids, in [0,1].

    Each grid is normalized to unit mass over the domain first, so
    identical densities overlap at exactly 1 regardless of boundary
    leakage.
    """
    if d1.values.shape != d2.values.shape or not np.allclose(d1.xs, d2.xs):
        raise ValueError("density grids must be identical")
    m1, m2 = d1.mass(), d2.mass()
    if m1 <= 0 or m2 <= 0:
        return 0.0
    a = d1.values / m1
    b = d2.values / m2
    return float(np.minimum(a, b).sum() * d1.cell_area)


# -- exports -------------------------------------------------------------------


def save_density_csv(path, grid: DensityGrid) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in grid.values:
            writer.writerow([f"{v!r}" for v in row])


def save_marginals_csv(path, grid: DensityGrid) -> None:
    px, py = grid.marginals()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["coordinate", "p_lx", "p_ly"])
        for x, vx, vy in zip(grid.xs, px, py):
            writer.writerow([f"{x!r}", f"{vx!r}", f"{vy!r}"])


def save_density_png(path, grid: DensityGrid) -> None:
    """8-bit grayscale heatmap, max-normalized."""
    peak = grid.values.max()
    img = grid.values / peak if peak > 0 else grid.values
    imageio.save_png(path, img[..., None])
