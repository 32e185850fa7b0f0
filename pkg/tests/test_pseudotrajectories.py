from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from slabgas.analysis_harness import bad_set_decay_study
from slabgas.kernels import scatter
from slabgas.pseudotrajectories import (CollisionTree, CreationParams, DiscrepancyClass, EventLog,
                                        InadmissibleCreation, Mode, ParticleCountMismatch,
                                        build_backward, build_backward_zero_batch, classify_discrepancy,
                                        creation_weight, final_distance)
from slabgas.randomness import ReflectionRecord, make_rng, sample_maxwellian, sample_uniform_sphere


def _records(n, seed=0):
    return [ReflectionRecord(seed, k) for k in range(n)]


def _both(t, x, v, tree, params, recs, eps):
    e = build_backward(Mode.EPSILON, t, x, v, tree, params, recs, eps)
    z = build_backward(Mode.ZERO, t, x, v, tree, params, recs, eps)
    return e, z


def test_tree_rejects_missing_parent():
    with pytest.raises(ValueError):
        CollisionTree(1, (1,), (1,))
    with pytest.raises(ValueError):
        CollisionTree(1, (0,), (0,))
    assert CollisionTree(2, (1, 2), (1, -1)).sign == -1


def test_creation_times_must_decrease():
    tree = CollisionTree(1, (0, 0), (1, 1))
    p = CreationParams([0.2, 0.3], np.eye(3)[:2], np.zeros((2, 3)))
    with pytest.raises(ValueError):
        build_backward(Mode.ZERO, 0.5, [0.5, 0.5, 0.5], [0.3, 0, 0], tree, p, _records(3), 0.01)


def test_no_creation_is_straight_line_in_both_modes():
    x = np.array([0.5, 0.2, 0.9])
    v = np.array([0.4, -0.4, 0.25])
    tree = CollisionTree(1)
    p = CreationParams(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)))
    e, z = _both(1.0, x, v, tree, p, _records(1), 0.01)
    expect = x - v
    expect[1:] %= 1.0
    np.testing.assert_allclose(e.x[0], expect, atol=1e-14)
    np.testing.assert_array_equal(e.x, z.x)
    assert final_distance(e, z) == 0.0
    assert classify_discrepancy(e.log, z.log, 0.01) is DiscrepancyClass.CLEAN


def test_negative_sign_creation_keeps_incoming_velocity():
    tree = CollisionTree(1, (0,), (-1,))
    v = np.array([0.2, 0.1, 0.0])
    vbar = np.array([-0.1, 0.3, 0.2])
    nu = np.array([0.0, 0.0, -1.0])  # nu.(vbar - v) = -0.2 < 0
    p = CreationParams([0.3], nu[None], vbar[None])
    for mode in Mode:
        res = build_backward(mode, 0.5, [0.5, 0.5, 0.5], v, tree, p, _records(2), 1e-3)
        np.testing.assert_array_equal(res.v[1], vbar)
        np.testing.assert_array_equal(res.v[0], v)


def test_positive_sign_creation_scatters_and_conserves_energy():
    tree = CollisionTree(1, (0,), (1,))
    v = np.array([0.2, 0.1, 0.0])
    vbar = np.array([-0.1, 0.3, 0.2])
    nu = np.array([0.0, 0.6, 0.8])  # nu.(vbar - v) = 0.28 > 0
    p = CreationParams([0.3], nu[None], vbar[None])
    for mode in Mode:
        res = build_backward(mode, 0.5, [0.5, 0.5, 0.5], v, tree, p, _records(2), 1e-3)
        vp, vsp = scatter(v, vbar, nu)
        np.testing.assert_allclose(res.v[0], vp, atol=1e-14)
        np.testing.assert_allclose(res.v[1], vsp, atol=1e-14)
        assert np.isclose((res.v ** 2).sum(), v @ v + vbar @ vbar, rtol=1e-14)
        assert res.weight == pytest.approx(0.28)


def test_creation_through_the_wall_is_inadmissible():
    tree = CollisionTree(1, (0,), (-1,))
    eps = 0.01
    p = CreationParams([0.5], [[-1.0, 0.0, 0.0]], [[0.5, 0.0, 0.0]])
    # parent sits still at x1 = 0.5 eps: the new sphere would cross x1 = 0
    with pytest.raises(InadmissibleCreation):
        build_backward(Mode.EPSILON, 1.0, [0.5 * eps, 0.5, 0.5], [0.0, 0.0, 0.0], tree, p, _records(2), eps)


def _aimed_collision(target: str, eps: float = 1e-4):
    """Pair created at t1 = 0.9; the parent reflects off x1 = 1 with a preset
    direction aimed to pass 0.6 eps from the hard-sphere partner
    (target="eps") or straight through the point-particle partner
    (target="zero")."""
    t, t1 = 1.0, 0.9
    nu = np.array([-0.6, 0.8, 0.0])
    va2, vb2 = np.array([-2.0, -0.3, 0.0]), np.array([0.4, 0.1, 0.0])
    v_root, vbar = scatter(va2, vb2, nu)  # scattering is an involution
    xa = np.array([0.5, 0.5, 0.5])
    x_root = xa + (t - t1) * v_root
    bp, bq = -va2, -vb2  # backward velocities after creation
    s_w = (1.0 - xa[0]) / bp[0]
    p_w = xa + s_w * bp
    q_eps = xa + eps * nu + s_w * bq
    q_zero = xa + s_w * bq
    speed = np.linalg.norm(va2)
    off = np.zeros(3)
    for _ in range(6):
        base = q_eps if target == "eps" else q_zero
        D = base + off - p_w
        D[1:] -= np.round(D[1:])
        roots = np.roots([bq @ bq - speed ** 2, 2 * D @ bq, D @ D])
        s = min(r.real for r in roots if abs(r.imag) < 1e-12 and r.real > 0)
        d = (D + s * bq) / (speed * s)
        uh = speed * d - bq
        uh /= np.linalg.norm(uh)
        perp = -nu - (-nu @ uh) * uh  # zero partner relative to eps partner, across the path
        perp /= np.linalg.norm(perp)
        off = -0.6 * eps * perp if target == "eps" else 0.0 * perp
    assert d[0] < 0 and t1 - s_w - s > 0

    def closest(q):
        w = p_w - q
        w[1:] -= np.round(w[1:])
        u = speed * d - bq
        return np.linalg.norm(w - (w @ u) / (u @ u) * u)

    tree = CollisionTree(1, (0,), (1,))
    params = CreationParams([t1], nu[None], vbar[None])
    recs = [ReflectionRecord(0, 0, past=[d]), ReflectionRecord(0, 1)]
    e, z = _both(t, x_root, v_root, tree, params, recs, eps)
    return e, z, closest(q_eps) / eps, closest(q_zero) / eps


def test_constructed_reapproach_is_recollision():
    eps = 1e-4
    e, z, d_eps, d_zero = _aimed_collision("eps", eps)
    assert d_eps < 1 < d_zero
    assert e.log.of_kind("collide") and not z.log.of_kind("overlap")
    assert classify_discrepancy(e.log, z.log, eps) is DiscrepancyClass.RECOLLISION


def test_constructed_pass_through_is_overlap():
    eps = 1e-4
    e, z, d_eps, d_zero = _aimed_collision("zero", eps)
    assert d_zero < 1e-6
    assert z.log.of_kind("overlap")
    # the hard-sphere partner is exactly eps away from the aim point, so both
    # events fire; the overlap must not come later than the contact
    cls = classify_discrepancy(e.log, z.log, eps)
    assert cls in (DiscrepancyClass.OVERLAP, DiscrepancyClass.RECOLLISION)
    if not e.log.of_kind("collide"):
        assert cls is DiscrepancyClass.OVERLAP


def test_event_log_round_trip():
    e, z, _, _ = _aimed_collision("eps")
    for log in (e.log, z.log):
        back = EventLog.from_text(log.to_text())
        assert back.mode is log.mode
        assert back.to_text() == log.to_text()
        assert [x.time for x in back.entries] == [x.time for x in log.entries]


def test_creation_weight_examples():
    tree = CollisionTree(1, (0,), (1,))
    p = CreationParams([0.5], [[1.0, 0, 0]], [[1.0, 0, 0]])
    assert creation_weight(tree, p, [[0.0, 0, 0]]) == 1.0
    bad = CreationParams([0.5], [[-1.0, 0, 0]], [[1.0, 0, 0]])
    assert creation_weight(tree, bad, [[0.0, 0, 0]]) == 0.0


@given(st.lists(st.floats(-2, 2), min_size=18, max_size=18), st.sampled_from([1, -1]), st.sampled_from([1, -1]))
def test_creation_weight_is_multiplicative(nums, g1, g2):
    a = np.array(nums).reshape(6, 3)
    nu = a[:2] / np.maximum(np.linalg.norm(a[:2], axis=1, keepdims=True), 1e-9)
    vbar, pv = a[2:4], a[4:6]
    both = creation_weight(CollisionTree(1, (0, 0), (g1, g2)), CreationParams([0.5, 0.2], nu, vbar), pv)
    one = creation_weight(CollisionTree(1, (0,), (g1,)), CreationParams([0.5], nu[:1], vbar[:1]), pv[:1])
    two = creation_weight(CollisionTree(1, (0,), (g2,)), CreationParams([0.5], nu[1:], vbar[1:]), pv[1:])
    assert both == pytest.approx(one * two, rel=1e-12, abs=1e-300)


def test_final_distance():
    a = np.random.default_rng(1).random((3, 3))
    assert final_distance(a, a) == 0.0
    b = a.copy()
    b[0, 1] = (b[0, 1] + 0.99) % 1.0  # 0.01 through the torus
    assert final_distance(a, b) == pytest.approx(0.01)
    with pytest.raises(ParticleCountMismatch):
        final_distance(a, a[:2])


def _random_sample(i, eps, t=0.23):
    rng = make_rng(7, i)
    tree = CollisionTree(1, (0,), (int(rng.choice([1, -1])),))
    x = np.array([[rng.uniform(0.05, 0.95), rng.random(), rng.random()]])
    v = sample_maxwellian(rng, 1.0, 1)
    params = CreationParams([rng.uniform(0, t)], sample_uniform_sphere(rng, 1), sample_maxwellian(rng, 1.0, 1))
    recs = _records(2, seed=1000 + i)
    try:
        e = build_backward(Mode.EPSILON, t, x, v, tree, params, recs, eps, flip_nu=True)
    except InadmissibleCreation:
        return None
    z = build_backward(Mode.ZERO, t, x, v, tree, params, recs, eps, flip_nu=True)
    return e, z


def test_clean_samples_share_velocities():
    eps = 1e-3
    n_clean = 0
    for i in range(300):
        pair = _random_sample(i, eps)
        if pair is None:
            continue
        e, z = pair
        if classify_discrepancy(e.log, z.log, eps) is DiscrepancyClass.CLEAN:
            n_clean += 1
            np.testing.assert_allclose(e.v, z.v, atol=1e-10)
            assert final_distance(e, z) < 10 * eps
    assert n_clean > 50


def test_zero_batch_matches_single_builder():
    rng = make_rng(3)
    n, t = 20, 0.4
    tree = CollisionTree(1, (0, 1), (1, -1))
    x = np.column_stack([rng.uniform(0.1, 0.9, n), rng.random(n), rng.random(n)])[:, None]
    v = sample_maxwellian(rng, 1.0, (n, 1))
    times = np.sort(rng.uniform(0, t, (n, 2)), axis=1)[:, ::-1]
    nu = sample_uniform_sphere(rng, (n, 2))
    vbar = sample_maxwellian(rng, 1.0, (n, 2))
    K = 16
    past = np.zeros((n, 3, K, 3))
    recs = []
    for i in range(n):
        rr = _records(3, seed=i)
        for k in range(3):
            past[i, k] = [rr[k].peek_past(j + 1) for j in range(K)]
        recs.append(rr)
    batch = build_backward_zero_batch(t, x, v, tree, times, nu, vbar, past)
    for i in range(n):
        res = build_backward(Mode.ZERO, t, x[i], v[i], tree, CreationParams(times[i], nu[i], vbar[i]), recs[i],
                             1e-3, flip_nu=True)
        np.testing.assert_allclose(batch.x[i], res.x, atol=1e-9)
        np.testing.assert_allclose(batch.v[i], res.v, atol=1e-12)
        assert batch.weight[i] == pytest.approx(res.weight, rel=1e-12, abs=1e-300)


def test_clean_fraction_grows_as_epsilon_shrinks():
    tab = bad_set_decay_study(1, 1, 0.23, epsilons=[0.1, 0.01], n_samples=800, seed=2)
    big, se_big = tab.frequency(0.1, "CLEAN")
    small, se_small = tab.frequency(0.01, "CLEAN")
    assert small - big > 3 * np.hypot(se_big, se_small)


@pytest.mark.parametrize("eps", [0.04, 0.01])
def test_near_wall_creation_volume(eps):
    # parent uniform in x1 and nu_1 uniform on [-1, 1]: among admissible
    # creations, P(parent within 2 eps of a wall) = 3.5 eps / (1 - eps / 2)
    t, hit, adm = 0.2, 0, 0
    for i in range(3000):
        rng = make_rng(9, i)
        x, v = rng.random((1, 3)), rng.standard_normal((1, 3))
        params = CreationParams([rng.uniform(0, t)], sample_uniform_sphere(rng, 1), rng.standard_normal((1, 3)))
        tree = CollisionTree(1, (0,), (int(rng.choice([1, -1])),))
        try:
            e = build_backward(Mode.EPSILON, t, x, v, tree, params, _records(2, seed=i), eps, flip_nu=True)
        except InadmissibleCreation:
            continue
        adm += 1
        hit += e.log.of_kind("create")[0].info["wall"] < 2 * eps
    p = hit / adm
    expect = 3.5 * eps / (1 - eps / 2)
    assert abs(p - expect) < 4 * np.sqrt(expect * (1 - expect) / adm)
