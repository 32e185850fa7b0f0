from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from slabgas.densities import GaussianFamily, IsotropicMixture, ProfileMaxwellian
from slabgas.kernels import (NormParams, QuadratureBudgetExceeded, StripTarget, ball_relative_speed_integral,
                             carleman_pair, carleman_pushforward_check, collision_nodes, collision_operator,
                             mean_relative_speed_maxwellian, scatter, singular_integral, strip_integral, xnorm)

vec = st.lists(st.floats(-5, 5), min_size=3, max_size=3).map(np.array)
V0 = np.array([0.7, -0.3, 0.4])


def _unit(a):
    n = np.linalg.norm(a)
    return a / n if n > 1e-6 else np.array([0.0, 0.0, 1.0])


def test_scatter_exchange_example():
    vp, vsp = scatter([0, 0, 0], [1, 0, 0], [1, 0, 0])
    np.testing.assert_array_equal(vp, [1, 0, 0])
    np.testing.assert_array_equal(vsp, [0, 0, 0])


@given(vec, vec, vec)
def test_scatter_involution_and_conservation(v, vs, n):
    nu = _unit(n)
    vp, vsp = scatter(v, vs, nu)
    back = scatter(vp, vsp, nu)
    scale = 1 + np.abs(v).max() + np.abs(vs).max()
    np.testing.assert_allclose(back[0], v, atol=1e-12 * scale)
    np.testing.assert_allclose(back[1], vs, atol=1e-12 * scale)
    np.testing.assert_allclose(vp + vsp, v + vs, atol=1e-12 * scale)
    assert vp @ vp + vsp @ vsp == pytest.approx(v @ v + vs @ vs, rel=1e-12, abs=1e-12)


@given(vec, vec, vec)
def test_carleman_orthogonality(v, vs, n):
    pair = carleman_pair(v, vs, _unit(n))
    assert abs(pair.orthogonality()) <= 1e-10 * (1 + (v @ v + vs @ vs))


def test_pushforward_moments_agree():
    rep = carleman_pushforward_check(V0, 9.0, n_samples=100_000, seed=0)
    assert rep.max_abs_z < 3.0
    # total weighted mass against the radial quadrature of the scatter route
    assert rep.z_scores[0] == pytest.approx((rep.scatter_route[0] - rep.manifold_route[0])
                                            / math.hypot(rep.scatter_stderr[0], rep.manifold_stderr[0]))
    assert abs(rep.scatter_route[0] - rep.mass_quadrature) < 3 * rep.scatter_stderr[0]


def test_pushforward_isotropic_at_rest():
    rep = carleman_pushforward_check(np.zeros(3), 9.0, n_samples=100_000, seed=1)
    assert np.all(np.abs(rep.isotropy_z) < 3.0)


def test_ball_relative_speed_closed_form_at_rest():
    # int_{|w|<=R} |w| dw = pi R^4
    assert ball_relative_speed_integral(np.zeros(3), 2.0) == pytest.approx(math.pi * 16, rel=1e-10)


def test_maxwellian_pair_is_collision_invariant():
    M = ProfileMaxwellian(beta=1.0)
    V = np.array([[0.0, 0, 0], [1.0, 0.5, -0.3], [2.5, 0, 0]])
    c, gain, loss = collision_operator(M, M, [0.3, 0.5, 0.5], V, E_cut=60, n_quad=4096, parts=True)
    assert np.all(np.abs(c) <= 1e-12 * gain)


def test_zero_partner_gives_zero():
    M = ProfileMaxwellian(beta=1.0)
    zero = lambda x, v: np.zeros(np.shape(v)[:-1])  # noqa: E731
    assert collision_operator(M, zero, [0.5, 0.5, 0.5], V0, E_cut=30, n_quad=1024, beta_q=1.0) == 0.0


def test_loss_term_matches_relative_speed_integral():
    M = ProfileMaxwellian(beta=1.0)
    f = IsotropicMixture()
    x = np.array([0.3, 0.5, 0.5])
    V = np.array([[0.0, 0, 0], [1.0, 0.5, -0.3], [2.5, 0, 0]])
    _, _, loss = collision_operator(f, M, x, V, E_cut=60, n_quad=4096, parts=True)
    rho = M.profile(0.3)
    closed = np.array([math.pi * rho * mean_relative_speed_maxwellian(v, 1.0) for v in V])
    np.testing.assert_allclose(loss / f(x, V), closed, rtol=1e-2)
    # brute force: plain pseudo-random Gaussian partners, half-sphere mean pi |w|
    w = np.random.default_rng(11).standard_normal((400_000, 3))
    for v, c in zip(V, closed):
        s = math.pi * rho * np.linalg.norm(v - w, axis=1)
        assert abs(s.mean() - c) < 4 * s.std() / math.sqrt(len(s))


def test_collision_operator_is_bilinear():
    M = ProfileMaxwellian(beta=1.0)
    f = IsotropicMixture()
    twice = lambda x, v: 2.5 * f(x, v)  # noqa: E731
    x = [0.4, 0.5, 0.5]
    a = collision_operator(f, M, x, V0, 40, 2048)
    b = collision_operator(twice, M, x, V0, 40, 2048)
    assert b == pytest.approx(2.5 * a, rel=1e-12)


def test_quadrature_budget():
    with pytest.raises(QuadratureBudgetExceeded):
        collision_nodes(1 << 12, 1.0, 10.0, max_quad=1 << 10)


def test_xnorm_of_defining_family_is_one():
    fam = GaussianFamily(beta=1.0, mu=5.0)
    est = xnorm(fam, 1.0, 5.0, n_samples=2048)
    assert est.value == pytest.approx(1.0, rel=1e-12)
    scaled = xnorm(lambda s, x, v: -3.0 * fam(s, x, v), 1.0, 5.0, n_samples=2048)
    assert scaled.value == pytest.approx(3.0 * est.value, rel=1e-12)


def test_xnorm_tensorized_maxwellian():
    beta, mu = 1.0, 5.0
    fam = lambda s, x, v: (beta / (2 * math.pi)) ** (1.5 * s) * np.exp(-0.5 * beta * (v * v).sum((-1, -2)))  # noqa: E731
    est = xnorm(fam, beta, mu, s_values=(1, 2, 3), n_samples=4096)
    closed = max(((beta / (2 * math.pi)) ** 1.5 * math.exp(mu)) ** s for s in (1, 2, 3))
    assert est.value == pytest.approx(closed, rel=0.05)
    assert est.argmax_s == 3


def test_norm_params_reject_bad_beta():
    with pytest.raises(ValueError):
        NormParams(0.0, 1.0)


def test_strip_integral_examples():
    E = 9.0
    for tgt in StripTarget:
        assert strip_integral(V0, 0.2, 0.2, E, tgt) == 0.0
        ratio = strip_integral(V0, 0.2, 0.22, E, tgt) / strip_integral(V0, 0.2, 0.21, E, tgt)
        assert ratio == pytest.approx(2.0, abs=0.02)


def test_strip_integral_full_range_against_radial_formula():
    E = 9.0
    rho = math.sqrt(E - V0 @ V0)
    full = strip_integral(V0, -10, 10, E, StripTarget.V_STAR)
    assert full == pytest.approx(2 * math.pi * ball_relative_speed_integral(V0, rho), rel=1e-8)


def test_strip_integral_against_brute_force():
    E = 9.0
    rho = math.sqrt(E - V0 @ V0)
    rng = np.random.default_rng(5)
    n = 400_000
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    vs = d * rho * rng.random(n)[:, None] ** (1 / 3)
    vol = 4 / 3 * math.pi * rho ** 3
    for a, b in [(0.2, 0.7), (-1.5, -1.0)]:
        # int over S^2 of |w.nu| is 2 pi |w|
        g = 2 * math.pi * np.linalg.norm(V0 - vs, axis=1) * ((vs[:, 0] >= a) & (vs[:, 0] <= b)) * vol
        assert abs(strip_integral(V0, a, b, E, StripTarget.V_STAR) - g.mean()) < 4 * g.std() / math.sqrt(n)


@pytest.mark.parametrize("power", [1, 2])
@pytest.mark.parametrize("target", [StripTarget.V_STAR, StripTarget.V_PRIME])
def test_singular_integral_bound_shape(power, target):
    E = 9.0
    eps = [1e-2, 1e-3, 1e-4]
    scale = [e * abs(math.log(e)) if power == 1 else math.sqrt(e) for e in eps]
    ratios = [singular_integral(V0, e, E, power, target) / (E ** 2 * s) for e, s in zip(eps, scale)]
    # constant fitted at the largest epsilon must hold within 50% at the others
    assert all(0.5 * ratios[0] <= r <= 1.5 * ratios[0] for r in ratios)


def test_singular_integral_monotone():
    vals = [singular_integral(V0, e, 9.0, 1) for e in (1e-4, 1e-3, 1e-2, 1e-1)]
    assert np.all(np.diff(vals) > 0)
    assert singular_integral(V0, 1e-2, 9.0, 1) < singular_integral(V0, 1e-2, 16.0, 1)


def test_singular_integral_saturates_at_unit_epsilon():
    v = np.array([0.1, 0.1, 0.1])
    E = 0.9  # support inside |z| <= 1, so the cap is active everywhere
    for tgt in StripTarget:
        assert singular_integral(v, 1.0, E, 1, tgt) == pytest.approx(strip_integral(v, -5, 5, E, tgt), rel=1e-6)
