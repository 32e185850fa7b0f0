from __future__ import annotations

import math

import numpy as np
import pytest

from slabgas.boltzmann_solver import GridSpec, picard_solve
from slabgas.densities import IsotropicMixture, Profile, ProfileMaxwellian
from slabgas.duhamel_mc import (DegenerateSampleExcess, SeriesTruncation, continuity_bound_check,
                                enumerate_trees, estimate_term, prefactor, remainder_bounds,
                                series_observable, signed_trees, sum_series)
from slabgas.estimate import Estimate, combine
from slabgas.pseudotrajectories import CollisionTree, Mode

F0 = IsotropicMixture(profile=Profile(0.3, 1))
X = np.array([[0.4, 0.5, 0.5]])
V = np.array([[0.8, -0.5, 0.3]])


def _brute_trees(s, r):
    out = [()]
    for j in range(r):
        out = [a + (p,) for a in out for p in range(s + j)]
    return out


@pytest.mark.parametrize("s,r,count", [(1, 1, 1), (1, 2, 2), (2, 2, 6), (1, 3, 6), (2, 3, 24)])
def test_tree_counts(s, r, count):
    trees = enumerate_trees(s, r)
    assert len(trees) == count == math.prod(range(s, s + r))
    assert sorted(trees) == sorted(_brute_trees(s, r))
    assert len(signed_trees(s, r)) == count * 2 ** r
    for a in trees:
        CollisionTree(s, a, (1,) * r)  # parents exist


def test_tree_enumeration_is_bounded():
    with pytest.raises(ValueError):
        enumerate_trees(1, 5)


def test_estimate_arithmetic():
    e = Estimate.from_samples([1.0, 2.0, 3.0, 4.0])
    assert e.mean == 2.5 and e.n == 4
    assert e.stderr == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
    s = e + e.scaled(-2.0)
    assert s.mean == pytest.approx(-2.5)
    assert s.stderr == pytest.approx(math.hypot(e.stderr, 2 * e.stderr))
    assert combine([]).mean == 0.0
    with pytest.raises(ValueError):
        Estimate(0.0, 0.0, 0)


def test_truncation_validation():
    with pytest.raises(ValueError):
        SeriesTruncation(-1, 10.0, 0.1)
    with pytest.raises(ValueError):
        SeriesTruncation(1, 10.0, 0.5).check_horizon(0.4)


def test_zero_time_gives_initial_value():
    res = sum_series(Mode.ZERO, 1, 0.0, (X, V), F0, SeriesTruncation(2, 40.0, 0.4), budget=100)
    assert res.estimate.mean == float(F0(X[0], V[0]))
    assert res.estimate.stderr == 0.0


def test_pure_transport_without_wall_hits():
    t = 0.1  # x1 moves by 0.08, no wall in reach
    res = estimate_term(Mode.ZERO, 1, 0, t, (X, V), F0, SeriesTruncation(0, 40.0, 0.4), n_samples=50)
    y = X[0] - t * V[0]
    assert res.total.mean == pytest.approx(float(F0(y, V[0])), rel=1e-14)
    assert res.total.stderr < 1e-15


def test_positive_trees_give_nonnegative_terms():
    tree = CollisionTree(1, (0, 1), (1, 1))
    res = estimate_term(Mode.ZERO, 1, 2, 0.2, (X, V), F0, SeriesTruncation(2, 40.0, 0.4), 2000, trees=[tree])
    assert res.total.mean >= 0.0


def test_independent_runs_agree():
    trunc = SeriesTruncation(1, 40.0, 0.4)
    a = estimate_term(Mode.ZERO, 1, 1, 0.2, (X, V), F0, trunc, 20000, seed=1).total
    b = estimate_term(Mode.ZERO, 1, 1, 0.2, (X, V), F0, trunc, 20000, seed=2).total
    assert abs(a.mean - b.mean) < 3 * math.hypot(a.stderr, b.stderr)


def test_prefactor_limit():
    assert prefactor(Mode.ZERO, 1, 3) == 1.0
    eps = 0.1  # N = 100
    assert prefactor(Mode.EPSILON, 1, 2, eps) == pytest.approx(99 * 98 / 100 ** 2, rel=1e-12)
    gaps = [abs(prefactor(Mode.EPSILON, 1, 2, N ** -0.5) - 1) for N in (100, 10_000, 1_000_000)]
    assert gaps[0] > gaps[1] > gaps[2] and gaps[2] < 1e-5


def test_creation_remainder_halves():
    a, e1 = remainder_bounds(1, V[0], 1.0, 5.0, 2, 40.0, 1.0)
    b, e2 = remainder_bounds(1, V[0], 1.0, 5.0, 3, 40.0, 1.0)
    assert b == pytest.approx(a / 2) and e1 == e2


def test_crowded_creations_are_degenerate():
    # two resting roots 1.01 eps apart, 0.2 eps from the wall: a new sphere
    # crosses the wall or hits the other root for most directions
    eps = 0.01
    x = np.array([[0.002, 0.5, 0.5], [0.002, 0.5 + 1.01 * eps, 0.5]])
    with pytest.raises(DegenerateSampleExcess):
        estimate_term(Mode.EPSILON, 2, 1, 0.01, (x, np.zeros((2, 3))), F0, SeriesTruncation(1, 40.0, 0.4),
                      400, epsilon=eps)


def test_epsilon_mode_tracks_zero_mode_at_small_epsilon():
    trunc = SeriesTruncation(1, 40.0, 0.4)
    e = estimate_term(Mode.EPSILON, 1, 1, 0.1, (X, V), F0, trunc, 1500, seed=3, epsilon=1e-3).total
    z = estimate_term(Mode.ZERO, 1, 1, 0.1, (X, V), F0, trunc, 1500, seed=3).total
    # common draws: the difference is far below the sampling error of either
    assert abs(e.mean - z.mean) < 0.1 * z.stderr


def test_one_creation_term_matches_first_picard_iterate():
    t = 0.1
    r1 = estimate_term(Mode.ZERO, 1, 1, t, (X, V), F0, SeriesTruncation(1, 40.0, 0.4), 400_000, seed=3).total
    vals = []
    for spec in (GridSpec(nx=33, nc=20, nmu=16, dt=0.02, n_quad=1024),
                 GridSpec(nx=17, nc=20, nmu=8, dt=0.04, n_quad=512)):
        res = picard_solve(F0, t, tol=np.inf, grid=spec, snapshot_times=[t])
        assert res.iterations == 1
        vals.append(float(res.at(t)(X[0], V[0]) - res.transport_only[t](X[0], V[0])))
    grid_err = abs(vals[0] - vals[1])
    assert abs(r1.mean - vals[0]) < 3 * math.hypot(r1.stderr, grid_err)


def test_series_observable_of_equilibrium_density():
    f0 = ProfileMaxwellian(beta=1.0)
    trunc = SeriesTruncation(1, 40.0, 0.4)
    tot, by_r = series_observable(Mode.ZERO, [0.5, 0.5, 0.5], lambda v: np.ones(len(v)), 0.1, f0, trunc,
                                  20000, seed=4, per_r=True)
    assert abs(by_r[0].mean - 1.0) < 4 * by_r[0].stderr
    assert abs(by_r[1].mean) < 4 * by_r[1].stderr  # collisions leave the equilibrium alone
    assert tot.mean == pytest.approx(by_r[0].mean + by_r[1].mean)


def test_continuity_envelope_shape():
    rep = continuity_bound_check(n_samples=5000)
    assert rep.ratio0_ok
    assert rep.ratios[(0, 0.25)] <= 1.0
    # doubling t doubles the r = 1 envelope
    assert rep.ratios[(1, 0.5)] / rep.ratios[(1, 0.25)] == pytest.approx(2.0, rel=0.05)
    # geometric decay: (r=2)/(r=1) close to (r=1)/(r=0)
    for f in (0.25, 0.5):
        q1 = rep.ratios[(1, f)] / rep.ratios[(0, f)]
        q2 = rep.ratios[(2, f)] / rep.ratios[(1, f)]
        assert 0.5 <= q2 / q1 <= 1.5
    assert rep.stable
