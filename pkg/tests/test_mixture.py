"""Tests for the squashed mixture distribution.

The entropy and density operations are checked against independent
numeric oracles: a change-of-variables evaluation with finite-difference
Jacobian, adaptive 1-D quadrature, and a vectorized straight-line
reimplementation of the mixture density integrated on a 3-D Simpson grid.
"""

import math

import numpy as np
import pytest
from scipy.integrate import quad, simpson

from patchdist import rng
from patchdist.mixture import (
    Component,
    MixtureParams,
    ValidationError,
    draw_sample,
    entropy_grads,
    entropy_loss,
    log1m_tanh_sq,
    log_density_theta,
    one_hot,
    reparam_sample,
    sample_component,
    uniform_mixture,
)

TAU = 3000.0


def random_mixture(gen, k=None, tau=TAU, sigma_lo=0.05, sigma_hi=0.5, mu_scale=0.6):
    k = k or int(gen.integers(1, 6))
    mus = gen.uniform(-mu_scale * tau, mu_scale * tau, size=(k, 3))
    sigmas = gen.uniform(sigma_lo * tau, sigma_hi * tau, size=(k, 3))
    w = gen.dirichlet(np.ones(k))
    comps = [Component(mus[i], sigmas[i], w[i]) for i in range(k)]
    return MixtureParams(components=comps, tau=tau)


# ---------------------------------------------------------------------------
# validation and serialization
# ---------------------------------------------------------------------------


def test_weights_must_normalize():
    with pytest.raises(ValidationError):
        MixtureParams([Component(np.zeros(3), np.ones(3), 0.7)])


def test_sigma_must_be_positive():
    with pytest.raises(ValidationError):
        MixtureParams([Component(np.zeros(3), np.array([1.0, 0.0, 1.0]), 1.0)])


def test_serialization_round_trip_is_lossless():
    gen = rng.stream(7, "mixture.serialize")
    for _ in range(20):
        psi = random_mixture(gen)
        back = MixtureParams.from_json(psi.to_json())
        assert back.tau == psi.tau
        np.testing.assert_array_equal(back.mus, psi.mus)
        np.testing.assert_array_equal(back.sigmas, psi.sigmas)
        np.testing.assert_array_equal(back.weights, psi.weights)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def test_single_component_always_selected():
    psi = uniform_mixture(np.zeros((1, 3)), np.ones((1, 3)))
    gen = rng.stream(0, "mixture.k1")
    for _ in range(50):
        np.testing.assert_array_equal(sample_component(psi, gen), [1])


def test_degenerate_weights_select_deterministically():
    psi = MixtureParams(
        [
            Component(np.zeros(3), np.ones(3), 1.0),
            Component(np.ones(3), np.ones(3), 0.0),
            Component(-np.ones(3), np.ones(3), 0.0),
        ]
    )
    gen = rng.stream(1, "mixture.degenerate")
    for _ in range(200):
        np.testing.assert_array_equal(sample_component(psi, gen), [1, 0, 0])


def test_component_frequencies_match_weights():
    # Monte-Carlo frequency oracle: 1e5 draws, 3-sigma binomial band.
    psi = uniform_mixture(np.zeros((2, 3)), np.ones((2, 3)))
    gen = rng.stream(42, "mixture.freq")
    n = 100_000
    hits = sum(sample_component(psi, gen)[0] for _ in range(n))
    bound = 3.0 * math.sqrt(0.25 / n)
    assert abs(hits / n - 0.5) < bound


def test_reparam_zero_noise_hits_tanh_of_mean():
    psi = uniform_mixture(np.array([[1500.0, 0.0, 0.0]]), np.ones((1, 3)), tau=TAU)
    s = reparam_sample(psi, one_hot(1, 0), np.zeros(3))
    np.testing.assert_allclose(s.u, [1500.0, 0.0, 0.0])
    assert s.theta[0] == pytest.approx(0.46211715726000974, abs=1e-12)
    assert s.theta[1] == 0.0 and s.theta[2] == 0.0


def test_reparam_sampling_statistics():
    # Sampling-statistics oracle: empirical mean/var of u over 1e5 draws.
    gen = rng.stream(3, "mixture.stats")
    psi = random_mixture(gen, k=3)
    k = 1
    comp = psi.components[k]
    n = 100_000
    r = gen.standard_normal((n, 3))
    us = comp.mu + comp.sigma * r
    se_mean = comp.sigma / math.sqrt(n)
    assert np.all(np.abs(us.mean(axis=0) - comp.mu) < 3 * se_mean)
    # var of the sample variance ~ 2 sigma^4 / n
    se_var = comp.sigma**2 * math.sqrt(2.0 / n)
    assert np.all(np.abs(us.var(axis=0) - comp.sigma**2) < 3 * se_var)
    # and the op itself is deterministic given (gamma, r)
    s1 = reparam_sample(psi, one_hot(3, k), r[0])
    s2 = reparam_sample(psi, one_hot(3, k), r[0])
    np.testing.assert_array_equal(s1.theta, s2.theta)


def test_identical_seed_gives_bit_identical_streams():
    gen = rng.stream(5, "mixture.seedcheck")
    psi = random_mixture(gen, k=4)
    ga, gb = rng.stream(1234, "stream"), rng.stream(1234, "stream")
    for _ in range(100):
        sa, sb = draw_sample(psi, ga), draw_sample(psi, gb)
        np.testing.assert_array_equal(sa.gamma, sb.gamma)
        np.testing.assert_array_equal(sa.r, sb.r)
        np.testing.assert_array_equal(sa.theta, sb.theta)


def test_theta_strictly_inside_unit_cube_even_when_saturated():
    psi = uniform_mixture(np.array([[1e9, -1e9, 0.0]]), np.ones((1, 3)), tau=TAU)
    s = reparam_sample(psi, one_hot(1, 0), np.zeros(3))
    assert np.all(np.abs(s.theta) < 1.0)


# ---------------------------------------------------------------------------
# entropy loss
# ---------------------------------------------------------------------------


def test_entropy_worked_value():
    # K=1, w=1, mu=0, sigma=1, r=0, tau=3000:
    # per-dim -1 + log(2pi)/2 - log(3000) = -8.087429034445574
    psi = uniform_mixture(np.zeros((1, 3)), np.ones((1, 3)), tau=3000.0)
    val = entropy_loss(psi, one_hot(1, 0), np.zeros(3))
    assert val == pytest.approx(-24.2622874, abs=1e-6)
    assert val == pytest.approx(3 * (-1 + math.log(2 * math.pi) / 2 - math.log(3000.0)), abs=1e-12)


def test_entropy_tau_doubling_shifts_by_3_log2():
    lo = uniform_mixture(np.zeros((1, 3)), np.ones((1, 3)), tau=3000.0)
    hi = uniform_mixture(np.zeros((1, 3)), np.ones((1, 3)), tau=6000.0)
    a = entropy_loss(lo, one_hot(1, 0), np.zeros(3))
    b = entropy_loss(hi, one_hot(1, 0), np.zeros(3))
    assert a - b == pytest.approx(3 * math.log(2.0), abs=1e-12)


def _entropy_oracle(psi, gamma, r, weight_mode="raw"):
    """Change-of-variables oracle: density of theta via an FD Jacobian.

    -log p(theta | k) is evaluated from the normal density of u(theta) and a
    central-finite-difference estimate of du/dtheta, then the weight term is
    appended in the requested convention.
    """
    k = int(np.argmax(gamma))
    comp = psi.components[k]
    u = comp.mu + comp.sigma * np.asarray(r, dtype=float)
    theta = np.tanh(u / psi.tau)

    def u_of(t):
        return np.arctanh(t) * psi.tau

    val = 0.0
    for d in range(3):
        h = 1e-6 * (1.0 - theta[d] ** 2) + 1e-14
        jac = (u_of(theta[d] + h) - u_of(theta[d] - h)) / (2 * h)
        log_n = -0.5 * ((u[d] - comp.mu[d]) / comp.sigma[d]) ** 2 - math.log(
            comp.sigma[d]
        ) - 0.5 * math.log(2 * math.pi)
        val += -(log_n + math.log(abs(jac)))
    if weight_mode == "raw":
        return val - 3 * comp.weight
    return val - math.log(comp.weight)


def test_entropy_matches_change_of_variables_oracle():
    gen = rng.stream(11, "mixture.entropy_oracle")
    for _ in range(1000):
        psi = random_mixture(gen)
        k = int(gen.integers(psi.k))
        gamma = one_hot(psi.k, k)
        r = gen.standard_normal(3)
        got = entropy_loss(psi, gamma, r)
        want = _entropy_oracle(psi, gamma, r)
        assert got == pytest.approx(want, abs=1e-6)


def test_entropy_exact_mode_uses_log_weight():
    gen = rng.stream(12, "mixture.entropy_exact")
    for _ in range(100):
        psi = random_mixture(gen, k=3)
        k = int(gen.integers(3))
        gamma, r = one_hot(3, k), gen.standard_normal(3)
        got = entropy_loss(psi, gamma, r, weight_mode="exact")
        want = _entropy_oracle(psi, gamma, r, weight_mode="exact")
        assert got == pytest.approx(want, abs=1e-6)


def test_entropy_saturation_is_finite_and_flagged():
    psi = uniform_mixture(np.array([[1e7, 0.0, 0.0]]), np.ones((1, 3)), tau=3000.0)
    diag = {}
    val = entropy_loss(psi, one_hot(1, 0), np.zeros(3), diagnostics=diag)
    assert math.isfinite(val)
    assert diag["clamped"] is True
    # stable identity: log(1 - tanh^2(z)) ~ 2(log2 - z) for large z
    z = 1e7 / 3000.0
    assert log1m_tanh_sq(np.array([z]))[0] == pytest.approx(2 * (math.log(2) - z), rel=1e-12)


def test_entropy_grads_match_finite_differences():
    gen = rng.stream(13, "mixture.entropy_grads")
    for _ in range(50):
        psi = random_mixture(gen, k=2)
        k = int(gen.integers(2))
        gamma, r = one_hot(2, k), gen.standard_normal(3)
        dmu, dsig = entropy_grads(psi, gamma, r)
        eps = 1e-4 * psi.tau
        for d in range(3):
            for field, grad in (("mu", dmu), ("sigma", dsig)):
                shifted = [
                    MixtureParams.from_dict(psi.to_dict()) for _ in range(2)
                ]
                getattr(shifted[0].components[k], field)[d] += eps
                getattr(shifted[1].components[k], field)[d] -= eps
                fd = (
                    entropy_loss(shifted[0], gamma, r) - entropy_loss(shifted[1], gamma, r)
                ) / (2 * eps)
                assert grad[k, d] == pytest.approx(fd, rel=1e-5, abs=1e-12)


# ---------------------------------------------------------------------------
# log density of theta
# ---------------------------------------------------------------------------


def test_log_density_symmetry_for_centered_component():
    psi = uniform_mixture(np.zeros((1, 3)), np.full((1, 3), 500.0))
    gen = rng.stream(21, "mixture.symmetry")
    for _ in range(50):
        theta = gen.uniform(-0.9, 0.9, size=3)
        assert log_density_theta(psi, theta) == pytest.approx(
            log_density_theta(psi, -theta), abs=1e-10
        )


def test_log_density_domain_error():
    psi = uniform_mixture(np.zeros((1, 3)), np.ones((1, 3)))
    with pytest.raises(ValueError):
        log_density_theta(psi, np.array([1.0, 0.0, 0.0]))


def _vectorized_density(psi, t1, t2, t3):
    """Straight-line mixture density on a tensor grid (test-side oracle)."""
    th = np.stack(np.meshgrid(t1, t2, t3, indexing="ij"), axis=-1)
    u = np.arctanh(th) * psi.tau
    dens = np.zeros(th.shape[:3])
    for comp in psi.components:
        n = np.prod(
            np.exp(-0.5 * ((u - comp.mu) / comp.sigma) ** 2)
            / (np.sqrt(2 * np.pi) * comp.sigma),
            axis=-1,
        )
        dens += comp.weight * n
    jac = np.prod(psi.tau / (1.0 - th * th), axis=-1)
    return dens * jac


@pytest.mark.parametrize("k", [1, 2, 5])
def test_density_normalizes_on_simpson_grid(k):
    gen = rng.stream(31 + k, "mixture.quadrature")
    psi = random_mixture(gen, k=k, sigma_lo=0.2, sigma_hi=0.45, mu_scale=0.4)
    t = np.linspace(-0.999, 0.999, 121)
    dens = _vectorized_density(psi, t, t, t)
    # the vectorized oracle agrees with the public scalar op
    for _ in range(50):
        idx = gen.integers(0, len(t), size=3)
        want = math.exp(log_density_theta(psi, np.array([t[idx[0]], t[idx[1]], t[idx[2]]])))
        assert dens[tuple(idx)] == pytest.approx(want, rel=1e-10)
    total = simpson(simpson(simpson(dens, x=t, axis=2), x=t, axis=1), x=t, axis=0)
    assert total == pytest.approx(1.0, abs=1e-3)


def test_density_normalizes_by_factorized_quadrature_single_component():
    # For a diagonal K=1 mixture the density factorizes; integrate each axis
    # with adaptive quadrature through the public scalar op only.
    gen = rng.stream(41, "mixture.quad1d")
    psi = random_mixture(gen, k=1, sigma_lo=0.15, sigma_hi=0.4, mu_scale=0.4)
    anchor = np.tanh(psi.components[0].mu / psi.tau)
    p_anchor = math.exp(log_density_theta(psi, anchor))

    def axis_integral(d):
        def slice_density(t):
            theta = anchor.copy()
            theta[d] = t
            return math.exp(log_density_theta(psi, theta))

        val, err = quad(slice_density, -1 + 1e-12, 1 - 1e-12, limit=200)
        return val

    total = np.prod([axis_integral(d) for d in range(3)]) / p_anchor**2
    assert total == pytest.approx(1.0, abs=1e-3)


def test_density_argmax_at_squashed_mean():
    gen = rng.stream(51, "mixture.argmax")
    for _ in range(5):
        mu = gen.uniform(-0.3 * TAU, 0.3 * TAU, size=(1, 3))
        sigma = np.full((1, 3), 0.1 * TAU)
        psi = uniform_mixture(mu, sigma, tau=TAU)
        t = np.linspace(-0.95, 0.95, 39)
        dens = _vectorized_density(psi, t, t, t)
        best = np.unravel_index(np.argmax(dens), dens.shape)
        target = np.tanh(mu[0] / TAU)
        expected = tuple(int(np.argmin(np.abs(t - x))) for x in target)
        assert best == expected
