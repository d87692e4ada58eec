"""Differentiable placement of a fixed-pattern patch onto an image.

The pattern and its binary mask are first centered on an image-sized zero
canvas. A placement theta = [l_x, l_y, phi] in [-1,1]^3 then warps the
canvas: each target pixel (x_t, y_t), in coordinates centered on the
canvas, samples the source at

    x_s =  cos(phi*pi/2) * x_t + sin(phi*pi/2) * y_t + w * l_x / 2
    y_s = -sin(phi*pi/2) * x_t + cos(phi*pi/2) * y_t + h * l_y / 2

with bilinear interpolation and zero padding, so a patch translated fully
off-image leaves the clean image. The rotation pivot is the canvas
center, keeping translation and rotation decoupled.

Compositing uses the warped (fractional) mask as a soft alpha so that
gradients survive at patch edges; `patch_footprint` thresholds it at 0.5
for reporting and exclusion checks. Pixels the warped mask never touches
come out bit-identical to the input image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InfeasiblePlacementError(RuntimeError):
    """No placement satisfying the exclusion mask was found."""


@dataclass
class PatchSpec:
    """Fixed pattern plus its binary mask, sharing spatial dims."""

    pattern: np.ndarray  # (hp, wp, C) values in [0, 1]
    mask: np.ndarray     # (hp, wp) values in {0, 1}

    def __post_init__(self):
        self.pattern = np.asarray(self.pattern, dtype=float)
        self.mask = np.asarray(self.mask, dtype=float)
        if self.pattern.ndim != 3:
            raise ValueError("pattern must be (h, w, c)")
        if self.mask.shape != self.pattern.shape[:2]:
            raise ValueError("mask and pattern must share spatial dims")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("mask must be binary")
        if self.mask.sum() < 1:
            raise ValueError("mask must cover at least one pixel")
        if self.pattern.min() < 0 or self.pattern.max() > 1:
            raise ValueError("pattern values must lie in [0, 1]")

    @property
    def dims(self) -> tuple[int, int]:
        return self.pattern.shape[0], self.pattern.shape[1]


def effective_theta(theta: np.ndarray, rotation: bool = True) -> np.ndarray:
    """Pin the rotation component to 0 when rotation is disabled."""
    theta = np.asarray(theta, dtype=float)
    if rotation:
        return theta
    out = theta.copy()
    out[2] = 0.0
    return out


def _check_theta(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (3,) or not np.isfinite(theta).all():
        raise ValueError("theta must be a finite 3-vector")
    if np.any(np.abs(theta) > 1.0):
        raise ValueError("theta components must lie in [-1, 1]")
    return theta


def embed_on_canvas(patch: PatchSpec, image_dims: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Center pattern and mask on an image-sized zero canvas."""
    h, w = image_dims
    hp, wp = patch.dims
    if hp > h or wp > w:
        raise ValueError(f"patch {patch.dims} larger than image {image_dims}")
    c = patch.pattern.shape[2]
    pat = np.zeros((h, w, c))
    msk = np.zeros((h, w))
    top, left = (h - hp) // 2, (w - wp) // 2
    pat[top : top + hp, left : left + wp] = patch.pattern
    msk[top : top + hp, left : left + wp] = patch.mask
    return pat, msk


def affine_grid(theta, patch_dims: tuple[int, int], image_dims: tuple[int, int]):
    """Source coordinates (x_s, y_s) for every target pixel, index units.

    Returns two (H, W) arrays indexing columns and rows of the canvas.
    `patch_dims` is only validated against `image_dims`; the transform
    itself operates on the image-sized canvas.
    """
    theta = _check_theta(theta)
    h, w = image_dims
    if patch_dims[0] > h or patch_dims[1] > w:
        raise ValueError(f"patch {patch_dims} larger than image {image_dims}")
    lx, ly, phi = theta
    a = phi * np.pi / 2.0
    cos_a, sin_a = np.cos(a), np.sin(a)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yt, xt = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    xs = cos_a * xt + sin_a * yt + w * lx / 2.0 + cx
    ys = -sin_a * xt + cos_a * yt + h * ly / 2.0 + cy
    return xs, ys


def _grid_jacobian(theta, image_dims):
    """d(x_s)/d(theta) and d(y_s)/d(theta), each (H, W, 3)."""
    theta = _check_theta(theta)
    h, w = image_dims
    lx, ly, phi = theta
    a = phi * np.pi / 2.0
    cos_a, sin_a = np.cos(a), np.sin(a)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yt, xt = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    dxs = np.zeros((h, w, 3))
    dys = np.zeros((h, w, 3))
    dxs[..., 0] = w / 2.0
    dys[..., 1] = h / 2.0
    half_pi = np.pi / 2.0
    dxs[..., 2] = half_pi * (-sin_a * xt + cos_a * yt)
    dys[..., 2] = half_pi * (-cos_a * xt - sin_a * yt)
    return dxs, dys


def bilinear_sample(source: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinearly sample `source` at (xs, ys); zero outside the source.

    Equivalent to the full double sum over source pixels with hat weights
    max(0, 1-|x_s-w|) * max(0, 1-|y_s-h|); only the four neighboring
    pixels can contribute, so the implementation gathers exactly those.
    """
    source = np.asarray(source, dtype=float)
    squeeze = source.ndim == 2
    if squeeze:
        source = source[..., None]
    hs, ws, c = source.shape

    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx = xs - x0
    fy = ys - y0

    out = np.zeros(xs.shape + (c,))
    for dy, wy in ((0, (1 - fy)), (1, fy)):
        yy = y0 + dy
        yok = (yy >= 0) & (yy < hs)
        for dx, wx in ((0, (1 - fx)), (1, fx)):
            xx = x0 + dx
            ok = yok & (xx >= 0) & (xx < ws)
            wgt = np.where(ok, wy * wx, 0.0)
            vals = source[np.clip(yy, 0, hs - 1), np.clip(xx, 0, ws - 1)]
            out += wgt[..., None] * vals
    return out[..., 0] if squeeze else out


def _bilinear_sample_and_coord_grads(source, xs, ys):
    """Sampled values plus dV/dx_s and dV/dy_s per output pixel.

    Within each unit cell the bilinear surface is linear in the coords; at
    integer coordinates (cell boundaries) the right-sided cell convention
    applies.
    """
    source = np.asarray(source, dtype=float)
    squeeze = source.ndim == 2
    if squeeze:
        source = source[..., None]
    hs, ws, c = source.shape

    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]

    def fetch(yy, xx):
        ok = (yy >= 0) & (yy < hs) & (xx >= 0) & (xx < ws)
        vals = source[np.clip(yy, 0, hs - 1), np.clip(xx, 0, ws - 1)]
        return np.where(ok[..., None], vals, 0.0)

    v00 = fetch(y0, x0)
    v01 = fetch(y0, x0 + 1)
    v10 = fetch(y0 + 1, x0)
    v11 = fetch(y0 + 1, x0 + 1)

    val = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)
    dvdx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
    dvdy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
    if squeeze:
        return val[..., 0], dvdx[..., 0], dvdy[..., 0]
    return val, dvdx, dvdy


def warp_patch(patch: PatchSpec, theta, image_dims) -> tuple[np.ndarray, np.ndarray]:
    """Warped pattern (H, W, C) and fractional mask (H, W) at placement theta."""
    pat, msk = embed_on_canvas(patch, image_dims)
    xs, ys = affine_grid(theta, patch.dims, image_dims)
    return bilinear_sample(pat, xs, ys), bilinear_sample(msk, xs, ys)


def compose(image: np.ndarray, patch: PatchSpec, theta) -> np.ndarray:
    """Composite the patch onto the image at placement theta.

    X_adv = (1 - m) * X + m * p with m, p the warped mask and pattern;
    output clamped to [0, 1]. Pixels with m == 0 are bit-identical to X.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 3:
        raise ValueError("image must be (h, w, c)")
    pat, msk = warp_patch(patch, theta, image.shape[:2])
    if pat.shape[2] != image.shape[2]:
        raise ValueError("patch and image channel counts differ")
    m = msk[..., None]
    return np.clip((1.0 - m) * image + m * pat, 0.0, 1.0)


def compose_jacobian(image: np.ndarray, patch: PatchSpec, theta) -> np.ndarray:
    """Analytic d(compose)/d(theta), shape (H, W, C, 3).

    d out / d theta_j = (p - X) * dm/dtheta_j + m * dp/dtheta_j, with the
    mask and pattern coordinate sensitivities chained through the grid.
    The clamp in `compose` is inactive for in-range inputs (the output is
    a convex combination of values in [0, 1]) and is ignored here.
    """
    image = np.asarray(image, dtype=float)
    pat, msk = embed_on_canvas(patch, image.shape[:2])
    xs, ys = affine_grid(theta, patch.dims, image.shape[:2])
    dxs, dys = _grid_jacobian(theta, image.shape[:2])

    p, dp_dx, dp_dy = _bilinear_sample_and_coord_grads(pat, xs, ys)
    m, dm_dx, dm_dy = _bilinear_sample_and_coord_grads(msk, xs, ys)

    # coordinate chains: dm is (H, W, 3), dp is (H, W, C, 3)
    dm = dm_dx[..., None] * dxs + dm_dy[..., None] * dys
    dp = dp_dx[..., None] * dxs[:, :, None, :] + dp_dy[..., None] * dys[:, :, None, :]

    diff = p - image  # (H, W, C)
    jac = diff[..., None] * dm[..., None, :] + m[..., None, None] * dp
    return jac


def compose_vjp(image: np.ndarray, patch: PatchSpec, theta, grad_out: np.ndarray) -> np.ndarray:
    """Contract d(compose)/d(theta) with an upstream gradient, giving (3,).

    Same math as `compose_jacobian` without materializing the full
    (H, W, C, 3) tensor; used in the training hot path.
    """
    image = np.asarray(image, dtype=float)
    grad_out = np.asarray(grad_out, dtype=float)
    pat, msk = embed_on_canvas(patch, image.shape[:2])
    xs, ys = affine_grid(theta, patch.dims, image.shape[:2])
    dxs, dys = _grid_jacobian(theta, image.shape[:2])

    p, dp_dx, dp_dy = _bilinear_sample_and_coord_grads(pat, xs, ys)
    m, dm_dx, dm_dy = _bilinear_sample_and_coord_grads(msk, xs, ys)

    g_m = np.sum(grad_out * (p - image), axis=2)          # dL/dm, (H, W)
    g_p = grad_out * m[..., None]                          # dL/dp, (H, W, C)
    g_x = g_m * dm_dx + np.sum(g_p * dp_dx, axis=2)        # dL/dx_s
    g_y = g_m * dm_dy + np.sum(g_p * dp_dy, axis=2)
    return np.array(
        [
            np.sum(g_x * dxs[..., j] + g_y * dys[..., j])
            for j in range(3)
        ]
    )


def patch_footprint(patch: PatchSpec, theta, image_dims, threshold: float = 0.5) -> np.ndarray:
    """Boolean (H, W) footprint: warped mask at or above `threshold`."""
    _, msk = warp_patch(patch, theta, image_dims)
    return msk >= threshold


def check_exclusion(patch: PatchSpec, theta, exclusion: np.ndarray | None, image_dims) -> bool:
    """True when the placement's footprint avoids the exclusion mask."""
    if exclusion is None:
        return True
    exclusion = np.asarray(exclusion, dtype=bool)
    if exclusion.shape != tuple(image_dims):
        raise ValueError("exclusion mask dims must match the image")
    return not np.any(patch_footprint(patch, theta, image_dims) & exclusion)
