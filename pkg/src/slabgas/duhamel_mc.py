"""Monte Carlo evaluation of the collision-tree series.

For a signed tree (a, sigma) with r creations the term is

    int dLambda_{a,sigma} f0^{(s+r)}(zeta(0)),

dLambda = prod_k [sigma_k nu_k.(vbar_k - v_{a(k)}(t_k^+))]_+ dt_k dvbar_k dnu_k
times the law of the reflection records.  Samples use times uniform on the
ordered simplex, vbar_k uniform on the ball allowed by the remaining energy
budget, and nu_k uniform on the sphere, flipped onto the admissible
hemisphere (which doubles its density and leaves the factor 2 pi).
"""
from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .densities import DensityFunction, GaussianFamily
from .estimate import Estimate, combine
from .pseudotrajectories import (CollisionTree, CreationParams, InadmissibleCreation, Mode,
                                 build_backward, build_backward_zero_batch)
from .randomness import ReflectionRecord, make_rng, sample_diffuse_direction, sample_uniform_sphere

__all__ = ["Estimate", "SeriesTruncation", "DegenerateSampleExcess", "enumerate_trees",
           "signed_trees", "estimate_term", "sum_series", "continuity_bound_check",
           "fit_time_horizon", "series_observable", "prefactor"]


class DegenerateSampleExcess(RuntimeError):
    """More than half of the samples fell outside the admissible set."""


@dataclass(frozen=True)
class SeriesTruncation:
    R: int
    E: float
    T: float

    def __post_init__(self):
        if self.R < 0 or not self.E > 0 or not self.T > 0:
            raise ValueError("need R >= 0, E > 0 and T > 0")

    def check_horizon(self, fitted_T: float):
        if self.T > fitted_T:
            raise ValueError(f"T={self.T} exceeds the fitted horizon {fitted_T:.4g}")


def enumerate_trees(s: int, r: int) -> list[tuple]:
    """All parent sequences (a_0, ..., a_{r-1}) with a_j in {0..s+j-1}."""
    if r > 4:
        raise ValueError("tree enumeration is limited to r <= 4")
    return [tuple(a) for a in itertools.product(*[range(s + j) for j in range(r)])]


def signed_trees(s: int, r: int) -> list[CollisionTree]:
    return [CollisionTree(s, a, g) for a in enumerate_trees(s, r)
            for g in itertools.product((1, -1), repeat=r)]


def prefactor(mode: Mode, s: int, r: int, epsilon: float | None = None) -> float:
    """alpha(N-s, r) epsilon^{2r} with N = epsilon^{-2}, or 1 in ZERO mode."""
    if mode is Mode.ZERO:
        return 1.0
    N = int(round(epsilon ** -2))
    out = 1.0
    for j in range(r):
        out *= max(N - s - j, 0) * epsilon * epsilon
    return out


def _initial_value(f0, x, v) -> np.ndarray:
    """f0^{(m)} at configurations x, v of shape (n, m, 3)."""
    if isinstance(f0, DensityFunction):
        return np.prod(f0(x, v), axis=-1)
    return np.asarray(f0(x.shape[1], x, v), dtype=float)


def _records_depth(t: float, E: float) -> int:
    # at most t|v| + 1 reflections per particle, |v| <= E^{1/2}
    return int(math.ceil(t * math.sqrt(E))) + 2


@dataclass
class _Draws:
    times: np.ndarray
    nu: np.ndarray
    vbar: np.ndarray
    past: np.ndarray
    volume: np.ndarray  # simplex volume x ball volumes x 2 pi per creation


def _draw(rng, n, s, r, t, E, energy0, depth) -> _Draws:
    times = np.sort(rng.random((n, r)), axis=1)[:, ::-1] * t
    nu = sample_uniform_sphere(rng, (n, r))
    vbar = np.zeros((n, r, 3))
    left = np.maximum(E - energy0, 0.0) * np.ones(n)
    vol = np.full(n, t ** r / math.factorial(r) * (2 * math.pi) ** r)
    for k in range(r):
        rad = np.sqrt(left)
        d = sample_uniform_sphere(rng, n)
        vbar[:, k] = d * (rad * rng.random(n) ** (1 / 3))[:, None]
        vol *= 4.0 / 3.0 * math.pi * rad ** 3
        left = np.maximum(left - (vbar[:, k] ** 2).sum(-1), 0.0)
    past = sample_diffuse_direction(rng, -1, (n, s + r, depth))
    return _Draws(times, nu, vbar, past, vol)


@dataclass
class TermResult:
    per_tree: dict
    total: Estimate
    inadmissible: dict = field(default_factory=dict)


def _tree_samples(mode, tree, t, x_s, v_s, f0, trunc, n, rng, epsilon, absolute=False):
    """Per-sample contributions of one signed tree (unsigned)."""
    s, r = tree.s, tree.r
    x_s = np.asarray(x_s, dtype=float).reshape(-1, s, 3)
    v_s = np.asarray(v_s, dtype=float).reshape(-1, s, 3)
    if len(x_s) == 1:
        x_s = np.repeat(x_s, n, axis=0)
    if len(v_s) == 1:
        v_s = np.repeat(v_s, n, axis=0)
    energy0 = (v_s * v_s).sum(axis=(-1, -2))
    depth = _records_depth(t, trunc.E)
    dr = _draw(rng, n, s, r, t, trunc.E, energy0, depth)
    inside = energy0 <= trunc.E
    bad = 0
    if mode is Mode.ZERO:
        res = build_backward_zero_batch(t, x_s, v_s, tree, dr.times, dr.nu, dr.vbar, dr.past)
        f = _initial_value(f0, res.x, res.v)
        vals = dr.volume * res.weight * (np.abs(f) if absolute else f)
    else:
        vals = np.zeros(n)
        for i in range(n):
            if not inside[i]:
                continue
            recs = [ReflectionRecord(0, p, past=dr.past[i, p]) for p in range(s + r)]
            params = CreationParams(dr.times[i], dr.nu[i], dr.vbar[i])
            try:
                b = build_backward(Mode.EPSILON, t, x_s[i], v_s[i], tree, params, recs, epsilon,
                                   flip_nu=True)
            except InadmissibleCreation:
                bad += 1
                continue
            f = float(_initial_value(f0, b.x[None], b.v[None])[0])
            vals[i] = dr.volume[i] * b.weight * (abs(f) if absolute else f)
    vals = np.where(inside, vals, 0.0)
    if n and bad > n / 2:
        raise DegenerateSampleExcess(f"{bad}/{n} inadmissible samples for tree {tree.label()}")
    return vals, bad


def estimate_term(mode: Mode, s: int, r: int, t: float, z_s, f0, trunc: SeriesTruncation,
                  n_samples: int, seed: int = 0, epsilon: float | None = None,
                  absolute: bool = False, trees=None) -> TermResult:
    """Per signed tree estimates of the r-creation term at z_s = (x_s, v_s).

    The total is sum_tree sigma-product x estimate (or the plain sum of the
    unsigned estimates of |f0| when `absolute`, which majorises the term).
    """
    if t > trunc.T:
        raise ValueError("t exceeds the truncation horizon")
    if mode is Mode.EPSILON and epsilon is None:
        raise ValueError("EPSILON mode needs epsilon")
    x_s, v_s = z_s
    trees = signed_trees(s, r) if trees is None else trees
    per, bad, parts = {}, {}, []
    for idx, tree in enumerate(trees):
        rng = make_rng(seed, 0xD0, s, r, idx)
        vals, nb = _tree_samples(mode, tree, t, x_s, v_s, f0, trunc, n_samples, rng, epsilon, absolute)
        est = Estimate.from_samples(vals)
        per[tree.label()] = est
        bad[tree.label()] = nb
        parts.append(est if absolute else est.scaled(tree.sign))
    return TermResult(per, combine(parts), bad)


@dataclass
class SeriesResult:
    estimate: Estimate
    terms: list
    remainder_creations: float
    remainder_energy: float


def envelope_norm(f0, beta: float, mu: float, max_particles: int) -> float:
    """sup_{m <= max_particles} of the weighted norm of the tensor power of f0.

    For a density with envelope C exp(-b|v|^2/2), b >= beta, the weighted sup
    of f0^{(m)} is at most (C e^mu)^m.
    """
    if not isinstance(f0, DensityFunction):
        return 1.0
    C, b = f0.envelope()
    if b < beta:
        return math.inf
    q = C * math.exp(mu)
    return max(q ** m for m in range(1, max_particles + 1))


def remainder_bounds(s: int, v_s, beta: float, mu: float, R: int, E: float, norm: float):
    """Creation-count and energy remainders, as weights in the shifted norm.

    Both are expressed at z_s through the weight exp(-(mu-1)s - 3beta/8 |v_s|^2).
    """
    v_s = np.asarray(v_s, dtype=float)
    w = math.exp(-(mu - 1) * s - 0.375 * beta * float(np.sum(v_s * v_s)))
    return 2.0 ** (-R) * w * norm, 2.0 * math.exp(-beta * E / 16) * w * norm


def sum_series(mode: Mode, s: int, t: float, z_s, f0, trunc: SeriesTruncation, budget: int,
               seed: int = 0, epsilon: float | None = None, beta: float = 1.0,
               mu: float = 0.0) -> SeriesResult:
    """sum_{r <= R} prefactor(r) x term(r) with analytic remainder bounds attached."""
    terms = []
    parts = []
    for r in range(trunc.R + 1):
        if r == 0 and t == 0:
            x_s, v_s = z_s
            val = float(_initial_value(f0, np.asarray(x_s, float).reshape(1, s, 3),
                                       np.asarray(v_s, float).reshape(1, s, 3))[0])
            res = TermResult({"r0": Estimate(val, 0.0, 1)}, Estimate(val, 0.0, 1))
        elif t == 0:
            res = TermResult({}, Estimate(0.0, 0.0, 1))
        else:
            res = estimate_term(mode, s, r, t, z_s, f0, trunc, budget, seed, epsilon)
        terms.append(res)
        parts.append(res.total.scaled(prefactor(mode, s, r, epsilon)))
    norm = envelope_norm(f0, beta, mu, s + trunc.R)
    r2, r3 = remainder_bounds(s, z_s[1], beta, mu, trunc.R, trunc.E, norm)
    return SeriesResult(combine(parts), terms, r2, r3)


# -- observables -------------------------------------------------------------

def series_observable(mode: Mode, x, phi, t: float, f0, trunc: SeriesTruncation, n_samples: int,
                      seed: int = 0, epsilon: float | None = None, beta_q: float | None = None,
                      r_values=None, per_r: bool = False):
    """Estimate of int f(t, x, v) phi(v) dv from the truncated series (s = 1).

    v is drawn from a Gaussian of inverse temperature beta_q for every
    sample, so each tree contributes phi(v) / q(v) x (tree sample).
    """
    if beta_q is None:
        beta_q = 0.8 * f0.envelope()[1] if hasattr(f0, "envelope") else 0.8
    x = np.asarray(x, dtype=float).reshape(1, 1, 3)
    r_values = range(trunc.R + 1) if r_values is None else r_values
    by_r = {}
    for r in r_values:
        # every tree of order r reuses the same draws, so the signed sum
        # cancels sample by sample
        acc = np.zeros(n_samples)
        for tree in signed_trees(1, r):
            rng = make_rng(seed, 0x0B5, r)
            v = rng.standard_normal((n_samples, 1, 3)) / math.sqrt(beta_q)
            q = (beta_q / (2 * math.pi)) ** 1.5 * np.exp(-0.5 * beta_q * (v * v).sum(axis=(-1, -2)))
            if r == 0 and t == 0:
                vals = _initial_value(f0, np.repeat(x, n_samples, 0), v)
                inside = (v * v).sum(axis=(-1, -2)) <= trunc.E
                vals = np.where(inside, vals, 0.0)
            else:
                vals, _ = _tree_samples(mode, tree, t, x, v, f0, trunc, n_samples, rng, epsilon)
            w = np.asarray(phi(v[:, 0]), dtype=float) / q
            acc += tree.sign * vals * w
        by_r[r] = Estimate.from_samples(acc).scaled(prefactor(mode, 1, r, epsilon))
    total = combine(by_r.values())
    return (total, by_r) if per_r else total


# -- continuity envelope ---------------------------------------------------------

@dataclass
class ContinuityReport:
    beta: float
    mu: float
    ratios: dict  # (r, t) -> weighted sup of the majorant term
    constants: dict  # (r, t) -> fitted C for r >= 1
    reference_C: float
    horizon: float
    stable: bool
    ratio0_ok: bool

    def worst_deviation(self) -> float:
        return max(abs(c / self.reference_C - 1.0) for c in self.constants.values())


def _weighted_sup(r, t, beta, mu, speeds, n_samples, seed, E):
    """max over root speeds of e^{(mu-1) + 3beta/8 |v|^2} x majorant term (s = 1)."""
    fam = GaussianFamily(beta, mu)
    trunc = SeriesTruncation(max(r, 0), E, max(t, 1e-12))
    best = 0.0
    x = np.array([[0.5, 0.5, 0.5]])
    for j, sp in enumerate(speeds):
        rng = make_rng(seed, 0xC0, j)
        d = sample_uniform_sphere(rng)
        v = (sp * d).reshape(1, 3)
        if r == 0:
            val = float(fam(1, None, v[None])[0])
        else:
            val = estimate_term(Mode.ZERO, 1, r, t, (x, v), fam, trunc, n_samples,
                                seed=seed + 7919 * j, absolute=True).total.mean
        best = max(best, val * math.exp((mu - 1) + 0.375 * beta * sp * sp))
    return best


DEFAULT_SPEEDS = (0.0, 0.5, 1.0, 1.5, 2.0, 3.0)


def fit_constant(beta: float, mu: float, t: float = 0.1, n_samples: int = 20000, seed: int = 0,
                 speeds=DEFAULT_SPEEDS, E: float | None = None) -> float:
    """C from the r = 1 envelope: ratio_1 / ratio_0 = C beta^-2 e^-mu t."""
    E = E if E is not None else 25.0 / beta
    r0 = _weighted_sup(0, t, beta, mu, speeds, n_samples, seed, E)
    r1 = _weighted_sup(1, t, beta, mu, speeds, n_samples, seed, E)
    return (r1 / r0) * beta ** 2 * math.exp(mu) / t


@functools.lru_cache(maxsize=32)
def fit_time_horizon(beta: float = 1.0, mu: float = 5.0, n_samples: int = 20000, seed: int = 0):
    """(C, T) with T = beta^2 e^mu / (2 C), frozen for the given arguments."""
    C = fit_constant(beta, mu, n_samples=n_samples, seed=seed)
    return C, beta ** 2 * math.exp(mu) / (2 * C)


def continuity_bound_check(s: int = 1, r_values=(0, 1, 2), beta: float = 1.0, mu: float = 5.0,
                           n_samples: int = 20000, seed: int = 0, t_fractions=(0.25, 0.5),
                           tolerance: float = 0.5, speeds=DEFAULT_SPEEDS) -> ContinuityReport:
    """Fit the geometric envelope (C beta^-2 e^-mu t)^r of the majorant series.

    The hierarchy is exp(-mu m - beta/2 |v_m|^2), whose norm is exactly 1;
    its signed terms cancel (it is an equilibrium), so the envelope is
    fitted on the sum over signed trees of the unsigned estimates.
    """
    if s != 1:
        raise ValueError("the envelope check is implemented for s = 1")
    if max(r_values) > 3:
        raise ValueError("r <= 3")
    C_ref, T = fit_time_horizon(beta, mu, n_samples, seed)
    E = 25.0 / beta
    ratios, consts = {}, {}
    for frac in t_fractions:
        t = frac * T
        r0 = _weighted_sup(0, t, beta, mu, speeds, n_samples, seed + 1, E)
        ratios[(0, frac)] = r0
        for r in r_values:
            if r == 0:
                continue
            rr = _weighted_sup(r, t, beta, mu, speeds, n_samples, seed + 1, E)
            ratios[(r, frac)] = rr
            consts[(r, frac)] = (rr / r0) ** (1.0 / r) * beta ** 2 * math.exp(mu) / t
    stable = all(abs(c / C_ref - 1.0) <= tolerance for c in consts.values())
    ratio0_ok = all(ratios[(0, f)] <= 1.0 + 1e-12 for f in t_fractions)
    return ContinuityReport(beta, mu, ratios, consts, C_ref, T, stable, ratio0_ok)
