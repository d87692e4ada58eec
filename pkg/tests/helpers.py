"""Shared test utilities: kink-aware finite-difference gradient checks.

The compositing surface is piecewise smooth with kinks wherever a warped
source coordinate crosses an integer. A finite-difference probe that
straddles a kink measures a blend of one-sided slopes, so each probe
first checks the active coordinate cells at both probe points and
shrinks its step until no cell boundary is crossed.
"""

import numpy as np

from patchdist.compose import affine_grid, effective_theta
from patchdist.mixture import reparam_sample, uniform_mixture
from patchdist.prior import dopatch_objective


def _active_cells(net, image, patch, draws, flat, rotation):
    """floor() of warped coords on the active window, for each draw."""
    old = net.params_flat()
    net.set_params_flat(flat)
    try:
        mu, sigma, _ = net.forward(image)
        psi = uniform_mixture(mu, sigma, tau=net.tau)
        h, w = image.shape[:2]
        hp, wp = patch.dims
        top, left = (h - hp) // 2, (w - wp) // 2
        cells = []
        for gamma, r in draws:
            theta = effective_theta(reparam_sample(psi, gamma, r).theta, rotation)
            xs, ys = affine_grid(theta, patch.dims, (h, w))
            active = (
                (xs > left - 1.5)
                & (xs < left + wp + 0.5)
                & (ys > top - 1.5)
                & (ys < top + hp + 0.5)
            )
            cells.append((np.floor(xs[active]), np.floor(ys[active]), active))
        return cells
    finally:
        net.set_params_flat(old)


def _crossing(cells_a, cells_b):
    for (xa, ya, ma), (xb, yb, mb) in zip(cells_a, cells_b):
        if ma.shape != mb.shape or not np.array_equal(ma, mb):
            return True
        if not (np.array_equal(xa, xb) and np.array_equal(ya, yb)):
            return True
    return False


def check_objective_gradient(
    net,
    image,
    label,
    surrogate,
    patch,
    draws,
    lam,
    rotation,
    coords,
    tol=1e-4,
    h0=1e-6,
):
    """Central-difference check of the analytic objective gradient.

    Returns the worst relative error over the probed coordinates. Near-dead
    coordinates (below 1e-3 of the mean gradient magnitude) are compared on
    that scale instead of their own.
    """

    def objective_at(flat):
        old = net.params_flat()
        net.set_params_flat(flat)
        try:
            return dopatch_objective(
                net, image, label, surrogate, patch, lam=lam, rotation=rotation, draws=draws
            ).loss
        finally:
            net.set_params_flat(old)

    res = dopatch_objective(
        net, image, label, surrogate, patch, lam=lam, rotation=rotation, draws=draws
    )
    flat0 = net.params_flat()
    floor = 1e-3 * float(np.mean(np.abs(res.grad))) + 1e-12
    worst = 0.0
    for i in coords:
        h = h0
        for _ in range(6):
            fp, fm = flat0.copy(), flat0.copy()
            fp[i] += h
            fm[i] -= h
            cells_p = _active_cells(net, image, patch, draws, fp, rotation)
            cells_m = _active_cells(net, image, patch, draws, fm, rotation)
            if not _crossing(cells_p, cells_m):
                break
            h *= 0.25
        fd = (objective_at(fp) - objective_at(fm)) / (2 * h)
        denom = max(abs(fd), abs(res.grad[i]), floor)
        worst = max(worst, abs(fd - res.grad[i]) / denom)
    return worst
