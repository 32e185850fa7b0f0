from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from slabgas.densities import Profile, ProfileMaxwellian
from slabgas.randomness import (C3, RejectionBudgetExceeded, ReflectionRecord, ZeroSpeed, consume_reflection,
                                consume_reflection_backward, make_rng, sample_diffuse_direction,
                                sample_initial_configuration, sample_maxwellian, _pair_ok)


def test_cosine_law_normalisation():
    # int (w.e)_+ dw over the sphere = pi, so c3 = 1/pi
    val, _ = integrate.dblquad(lambda th, ph: max(math.cos(th), 0.0) * math.sin(th), 0, 2 * math.pi, 0, math.pi)
    assert val == pytest.approx(math.pi, rel=1e-8)
    assert C3 == pytest.approx(1 / math.pi)


def test_diffuse_direction_moments_and_cdf():
    rng = make_rng(7)
    w = sample_diffuse_direction(rng, 1, 100_000)
    np.testing.assert_allclose(np.linalg.norm(w, axis=1), 1.0, atol=1e-12)
    u = w[:, 0]
    assert np.all(u > 0)
    se = u.std() / math.sqrt(len(u))
    assert abs(u.mean() - 2 / 3) < 4 * se
    ks = stats.kstest(u, lambda x: np.clip(x, 0, 1) ** 2).statistic
    assert ks < 1.63 / math.sqrt(len(u))


def test_diffuse_direction_negative_side_and_azimuth():
    w = sample_diffuse_direction(make_rng(8), -1, 50_000)
    assert np.all(w[:, 0] < 0)
    phi = np.arctan2(w[:, 2], w[:, 1])
    assert stats.kstest(phi, stats.uniform(-math.pi, 2 * math.pi).cdf).pvalue > 1e-3


def test_maxwellian_moments():
    rng = make_rng(3)
    v = sample_maxwellian(rng, 1.0, 200_000)
    e = (v * v).sum(1)
    assert abs(e.mean() - 3) < 4 * e.std() / math.sqrt(len(e))
    v4 = sample_maxwellian(rng, 4.0, 200_000)
    assert v4.std(axis=0) == pytest.approx([0.5] * 3, rel=0.01)
    m4 = (v4 ** 4).mean(axis=0)
    assert m4 == pytest.approx([3 / 16] * 3, rel=0.03)
    with pytest.raises(ValueError):
        sample_maxwellian(rng, 0.0)


def test_single_particle_is_unconditioned():
    f0 = ProfileMaxwellian(1.0)
    st1 = sample_initial_configuration(make_rng(5), 1, 0.3, f0)
    x, v = f0.sample(make_rng(5), 1)
    np.testing.assert_array_equal(st1.x, x)
    np.testing.assert_array_equal(st1.v, v)


def test_zero_epsilon_is_iid():
    f0 = ProfileMaxwellian(1.0, Profile(0.4))
    s = sample_initial_configuration(make_rng(9), 20, 0.0, f0)
    x, v = f0.sample(make_rng(9), 20)
    np.testing.assert_array_equal(s.x, x)
    assert all(r.past == [] for r in s.records)


def _pair_overlap_probability(eps):
    # E_x1 |B(x, eps) cut to the slab|: ball volume minus the caps beyond the walls
    cap = lambda h: math.pi * h * h * (3 * eps - h) / 3 if h > 0 else 0.0
    ball = 4 / 3 * math.pi * eps ** 3
    val, _ = integrate.quad(lambda x1: ball - cap(eps - x1) - cap(eps - (1 - x1)), 0, 1, points=[eps, 1 - eps])
    return val


def test_two_particle_acceptance_matches_ball_volume():
    eps = 0.25
    p = _pair_overlap_probability(eps)
    rng = make_rng(11)
    x = rng.random((200_000, 2, 3))
    acc = _pair_ok(x, eps).mean()
    se = math.sqrt(acc * (1 - acc) / len(x))
    assert abs(acc - (1 - p)) < 4 * se
    # the conditioned sampler never returns an overlapping pair
    f0 = ProfileMaxwellian(1.0)
    for k in range(50):
        s = sample_initial_configuration(make_rng(12, k), 2, eps, f0)
        assert s.min_pair_distance() > eps


def test_rejection_budget():
    with pytest.raises(RejectionBudgetExceeded):
        sample_initial_configuration(make_rng(1), 40, 0.4, ProfileMaxwellian(1.0), method="exact", max_attempts=20)


def test_consume_reflection_examples():
    rec = ReflectionRecord(1, 2)
    v_in = np.array([-0.7, 0.2, 0.1])
    v_out, rec = consume_reflection(rec, v_in, +1)
    assert abs(np.linalg.norm(v_out) - np.linalg.norm(v_in)) <= 1e-15
    assert v_out[0] > 0
    assert rec.past[-1][0] < 0
    with pytest.raises(ZeroSpeed):
        consume_reflection(rec, np.zeros(3), 1)


def test_records_are_deterministic_and_lazy():
    a, b = ReflectionRecord(3, 4), ReflectionRecord(3, 4)
    np.testing.assert_array_equal(a.peek_future(17), b.peek_future(17))
    np.testing.assert_array_equal(a.peek_future(1), b.pop_future())
    assert not np.array_equal(ReflectionRecord(3, 5).peek_future(1), a.peek_future(1))
    assert all(a.peek_future(j)[0] > 0 and a.peek_past(j)[0] < 0 for j in range(1, 30))


@given(st.integers(0, 2 ** 32), st.lists(st.sampled_from([1, -1]), min_size=1, max_size=12))
def test_backward_replay_reconstructs_incoming(seed, gammas):
    rng = np.random.default_rng(seed)
    rec = ReflectionRecord(seed, 0)
    start = rec.copy()
    v = rng.standard_normal(3)
    history = []
    for g in gammas:
        v_in = v.copy()
        v_in[0] = -g * abs(v_in[0]) - 1e-3 * g
        v_out, rec = consume_reflection(rec, v_in, g)
        history.append((v_in, v_out, g))
        v = v_out
    for v_in, v_out, g in reversed(history):
        back, rec = consume_reflection_backward(rec, v_out, g)
        np.testing.assert_allclose(back, v_in, rtol=1e-12, atol=1e-12)
    assert rec.position == start.position
    np.testing.assert_allclose(rec.peek_future(1), start.peek_future(1), atol=1e-15)
