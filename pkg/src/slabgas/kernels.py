"""Binary collision kernels.

Scattering, the Carleman change of variables (v*, nu) -> (v', v*'), the
collision operator on evaluable densities, the weighted sup norm of a
hierarchy and the strip/singular integrals of the cross-section measure
|(v - v*).nu| dv* dnu.

Conventions: nu ranges over the whole sphere and the operator is written
with the positive parts,

    C(f, g)(v) = int int [f(v') g(v*') - f(v) g(v*)] ((v* - v).nu)_+ dnu dv*,

which equals half of the same integral against |(v - v*).nu|.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats
from scipy.stats import qmc

from .randomness import make_rng, sample_uniform_ball, sample_uniform_sphere


class QuadratureBudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class NormParams:
    beta: float
    mu: float

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    def weight(self, s: int, v) -> np.ndarray:
        """exp(mu s + beta/2 |v_s|^2) for v of shape (..., s, 3)."""
        v = np.asarray(v, dtype=float)
        return np.exp(self.mu * s + 0.5 * self.beta * np.sum(v * v, axis=(-1, -2)))


@dataclass(frozen=True)
class CarlemanPair:
    v: np.ndarray
    v_prime: np.ndarray
    v_star_prime: np.ndarray

    def orthogonality(self) -> float:
        return float(np.dot(self.v_prime - self.v, self.v_star_prime - self.v))


def scatter(v, v_star, nu):
    """Post-collisional pair; with the same nu the map is an involution."""
    v = np.asarray(v, dtype=float)
    v_star = np.asarray(v_star, dtype=float)
    nu = np.asarray(nu, dtype=float)
    k = np.sum(nu * (v - v_star), axis=-1, keepdims=True)
    return v - k * nu, v_star + k * nu


def carleman_pair(v, v_star, nu) -> CarlemanPair:
    vp, vsp = scatter(v, v_star, nu)
    return CarlemanPair(np.asarray(v, float), vp, vsp)


# -- Carleman pushforward ------------------------------------------------

def _plane_basis(h):
    """Two orthonormal vectors spanning the plane normal to each row of h."""
    h = h / np.linalg.norm(h, axis=-1, keepdims=True)
    trial = np.where(np.abs(h[:, :1]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
    a = np.cross(h, trial)
    a /= np.linalg.norm(a, axis=-1, keepdims=True)
    b = np.cross(h, a)
    return a, b


def _moment_features(vp, vsp):
    return np.concatenate([np.ones((len(vp), 1)), vp, vsp, vp * vp, vsp * vsp], axis=1)


MOMENT_NAMES = (["mass"] + [f"v'_{i}" for i in (1, 2, 3)] + [f"v*'_{i}" for i in (1, 2, 3)]
                + [f"v'_{i}^2" for i in (1, 2, 3)] + [f"v*'_{i}^2" for i in (1, 2, 3)])


@dataclass
class PushforwardReport:
    names: list
    scatter_route: np.ndarray
    scatter_stderr: np.ndarray
    manifold_route: np.ndarray
    manifold_stderr: np.ndarray
    z_scores: np.ndarray
    mass_quadrature: float
    isotropy_z: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z_scores)))


def _weighted_mean(features, weights):
    vals = features * weights[:, None]
    n = len(weights)
    return vals.mean(axis=0), vals.std(axis=0, ddof=1) / math.sqrt(n)


def ball_relative_speed_integral(v, radius: float) -> float:
    """int_{|w| <= radius} |v - w| dw by one-dimensional quadrature.

    Uses the spherical mean of |v - w| over |w| = r, which is
    r + a^2/(3r) for r > a and a + r^2/(3a) for r < a, with a = |v|.
    """
    a = float(np.linalg.norm(v))

    def shell(r):
        if a == 0.0:
            m = r
        elif r > a:
            m = r + a * a / (3 * r)
        else:
            m = a + r * r / (3 * a)
        return 4 * math.pi * r * r * m

    pts = [a] if 0 < a < radius else None
    val, _ = integrate.quad(shell, 0.0, radius, points=pts, epsabs=1e-12, epsrel=1e-12, limit=200)
    return val


def carleman_pushforward_check(v, E: float, n_samples: int = 200_000, seed: int = 0) -> PushforwardReport:
    """Compare weighted moments of (v', v*') built two independent ways.

    Scatter route: (v*, nu) uniform on B(E^{1/2}) x S^2, weight
    |(v - v*).nu|, mapped through `scatter`.
    Manifold route: v' uniform in a ball containing the support, v*' uniform
    in a disk of the plane through v normal to v' - v, density
    2 / |v' - v| with respect to dv' dS(v*'), kept when the implied
    v* = v' + v*' - v lies in B(E^{1/2}).  The factor 2 counts the two
    preimages nu and -nu of every post-collisional pair.
    """
    v = np.asarray(v, dtype=float)
    rng = make_rng(seed, 0xCA7)
    rootE = math.sqrt(E)
    n = int(n_samples)

    # scatter route
    vs = sample_uniform_ball(rng, rootE, n)
    nu = sample_uniform_sphere(rng, n)
    wA = np.abs(((v - vs) * nu).sum(-1)) * (4.0 / 3.0 * math.pi * E ** 1.5) * 4 * math.pi
    vp, vsp = scatter(v, vs, nu)
    fA = _moment_features(vp, vsp)
    mA, sA = _weighted_mean(fA, wA)

    # manifold route
    Rp = math.sqrt(float(v @ v) + E)
    Rk = rootE + Rp
    vp2 = sample_uniform_ball(rng, Rp, n)
    h = vp2 - v
    a, b = _plane_basis(h)
    rad = Rk * np.sqrt(rng.random(n))
    phi = 2 * math.pi * rng.random(n)
    k = rad[:, None] * (np.cos(phi)[:, None] * a + np.sin(phi)[:, None] * b)
    vsp2 = v + k
    vstar = vp2 + k
    inside = (vstar * vstar).sum(-1) <= E
    wB = np.where(inside, 2.0 / np.linalg.norm(h, axis=-1), 0.0)
    wB *= (4.0 / 3.0 * math.pi * Rp ** 3) * (math.pi * Rk * Rk)
    fB = _moment_features(vp2, vsp2)
    mB, sB = _weighted_mean(fB, wB)

    z = (mA - mB) / np.sqrt(sA ** 2 + sB ** 2)
    mass = 2 * math.pi * ball_relative_speed_integral(v, rootE)
    # isotropy diagnostic of v' under the scatter route (meaningful at v = 0)
    iso = mA[1:4] / sA[1:4]
    return PushforwardReport(list(MOMENT_NAMES), mA, sA, mB, sB, z, mass, iso)


# -- collision operator ----------------------------------------------------

@dataclass(frozen=True)
class CollisionNodes:
    """Shared quadrature nodes (v*, nu) with weights for int int . dnu dv*."""

    v_star: np.ndarray
    nu: np.ndarray
    weight: np.ndarray

    @property
    def n(self) -> int:
        return len(self.weight)


def collision_nodes(n_quad: int, beta_q: float, E_cut: float, seed: int = 0,
                    max_quad: int = 1 << 20) -> CollisionNodes:
    """Scrambled Sobol nodes: v* Gaussian with inverse temperature beta_q,
    nu uniform on the sphere.  Weights include 1/density and the cutoff
    |v*|^2 <= E_cut."""
    if n_quad > max_quad:
        raise QuadratureBudgetExceeded(f"{n_quad} nodes requested, budget {max_quad}")
    m = max(1, int(math.ceil(math.log2(max(n_quad, 2)))))
    u = qmc.Sobol(d=5, scramble=True, seed=int(seed)).random_base2(m)
    u = np.clip(u, 1e-12, 1 - 1e-12)
    g = stats.norm.ppf(u[:, :3])
    vs = g / math.sqrt(beta_q)
    dens = (beta_q / (2 * math.pi)) ** 1.5 * np.exp(-0.5 * beta_q * (vs * vs).sum(-1))
    c = 2 * u[:, 3] - 1
    s = np.sqrt(1 - c * c)
    ph = 2 * math.pi * u[:, 4]
    nu = np.stack([c, s * np.cos(ph), s * np.sin(ph)], axis=-1)
    w = 4 * math.pi / dens / len(u)
    w = np.where((vs * vs).sum(-1) <= E_cut, w, 0.0)
    return CollisionNodes(vs, nu, w)


def collision_operator(f, g, x, v, E_cut: float, n_quad: int = 4096, seed: int = 0,
                       beta_q: float | None = None, max_quad: int = 1 << 20, parts: bool = False):
    """Quadrature value of C(f, g)(x, v) = gain - loss.

    f and g are callables (x, v) -> density.  v may be a single velocity or
    an array (m, 3); x is a single position.  The gain and the loss share
    the same nodes, so an equilibrium pair cancels node by node.
    """
    if not E_cut > 0:
        raise ValueError("E_cut must be positive")
    if beta_q is None:
        beta_q = g.envelope()[1] if hasattr(g, "envelope") else 1.0
    nodes = collision_nodes(n_quad, beta_q, E_cut, seed, max_quad)
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    V = v.reshape(-1, 3)
    x = np.asarray(x, dtype=float)
    gain = np.empty(len(V))
    loss = np.empty(len(V))
    for i, vi in enumerate(V):
        rel = ((nodes.v_star - vi) * nodes.nu).sum(-1)
        k = np.maximum(rel, 0.0) * nodes.weight
        vp, vsp = scatter(vi, nodes.v_star, nodes.nu)
        X = np.broadcast_to(x, vp.shape)
        gain[i] = np.sum(k * f(X, vp) * g(X, vsp))
        loss[i] = float(f(x, vi)) * np.sum(k * g(X, nodes.v_star))
    out = (gain - loss, gain, loss) if parts else gain - loss
    if single:
        return tuple(float(o[0]) for o in out) if parts else float(out[0])
    return out


def mean_relative_speed_maxwellian(v, beta: float) -> float:
    """int M_beta(w) |v - w| dw in closed form."""
    a = float(np.linalg.norm(v)) * math.sqrt(beta)
    if a < 1e-8:
        return math.sqrt(8 / math.pi) / math.sqrt(beta)
    val = (a + 1 / a) * math.erf(a / math.sqrt(2)) + math.sqrt(2 / math.pi) * math.exp(-a * a / 2)
    return val / math.sqrt(beta)


# -- weighted sup norm -----------------------------------------------------

@dataclass(frozen=True)
class XNormEstimate:
    value: float
    resolution: float
    argmax_s: int


def xnorm(f_family, beta: float, mu: float, s_values=(1, 2, 3), n_samples: int = 4096,
          seed: int = 0, vmax: float | None = None) -> XNormEstimate:
    """Stratified lower estimate of sup_s sup |f^s| exp(mu s + beta/2 |v_s|^2).

    f_family(s, x, v) takes arrays of shape (n, s, 3).  For each s the
    total speed |v_s| is stratified on [0, vmax] in n_samples layers (the
    first layer includes |v_s| = 0), directions and positions are uniform.
    `resolution` is the stratum width in |v_s|.
    """
    p = NormParams(beta, mu)
    rng = make_rng(seed, 0x0A0A)
    vmax = vmax if vmax is not None else 8.0 / math.sqrt(beta)
    best, arg = -math.inf, s_values[0]
    for s in s_values:
        n = n_samples
        layer = (np.arange(n) + rng.random(n)) / n
        layer[0] = 0.0
        radius = vmax * layer
        d = rng.standard_normal((n, 3 * s))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        v = (d * radius[:, None]).reshape(n, s, 3)
        x = rng.random((n, s, 3))
        val = np.abs(np.asarray(f_family(s, x, v), dtype=float)) * p.weight(s, v)
        m = float(np.max(val))
        if m > best:
            best, arg = m, s
    return XNormEstimate(best, vmax / n_samples, arg)


# -- strip and singular integrals -------------------------------------------

class StripTarget(enum.Enum):
    V_STAR = "v*"
    V_PRIME = "v'"
    V_STAR_PRIME = "v*'"


_GL_CACHE: dict[int, tuple] = {}


def _gl(n):
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


def _gl_on(a, b, n):
    x, w = _gl(n)
    return 0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w


def _ball_radius(v, E):
    r2 = E - float(v @ v)
    return math.sqrt(r2) if r2 > 0 else 0.0


def marginal_density(v, E: float, target: StripTarget, z, n_radial: int = 64,
                     n_angle: int = 64) -> np.ndarray:
    """Density in z of the law of (v_i . e) under the energy-truncated measure.

    V_STAR: v* = (z, q) with q in the disk of radius (rho^2 - z^2)^{1/2},
    rho^2 = E - |v|^2; the nu integral of |(v - v*).nu| is 2 pi |v - v*|.

    V_PRIME: by the Carleman change of variables with v' = v + t u,
    the density reduces to int dphi int_{t >= |z - v_1|} 2 pi
    (rho^2 - (v.u + t)^2)_+ dt where u has first component (z - v_1)/t.
    The measure on (v', v*') is symmetric under exchange, so V_STAR_PRIME
    has the same marginal.
    """
    v = np.asarray(v, dtype=float)
    z = np.atleast_1d(np.asarray(z, dtype=float))
    rho = _ball_radius(v, E)
    out = np.zeros(z.shape)
    if rho == 0.0:
        return out
    phi = 2 * math.pi * (np.arange(n_angle) + 0.5) / n_angle
    dphi = 2 * math.pi / n_angle
    if target is StripTarget.V_STAR:
        p = v[1:]
        for i, zi in enumerate(z):
            R2 = rho * rho - zi * zi
            if R2 <= 0:
                continue
            r, wr = _gl_on(0.0, math.sqrt(R2), n_radial)
            q2 = r[:, None] * np.cos(phi)[None, :] - p[0]
            q3 = r[:, None] * np.sin(phi)[None, :] - p[1]
            dist = np.sqrt((v[0] - zi) ** 2 + q2 * q2 + q3 * q3)
            out[i] = 2 * math.pi * np.sum(wr[:, None] * r[:, None] * dist) * dphi
        return out
    tmax = rho + float(np.linalg.norm(v))
    for i, zi in enumerate(z):
        t0 = abs(zi - v[0])
        if t0 >= tmax:
            continue
        t, wt = _gl_on(t0, tmax, n_radial)
        u1 = (zi - v[0]) / np.where(t > 0, t, 1.0)
        u1 = np.clip(u1, -1.0, 1.0)
        sn = np.sqrt(1 - u1 * u1)
        vu = v[0] * u1[:, None] + sn[:, None] * (v[1] * np.cos(phi) + v[2] * np.sin(phi))[None, :]
        val = np.maximum(rho * rho - (vu + t[:, None]) ** 2, 0.0)
        out[i] = 2 * math.pi * np.sum(wt[:, None] * val) * dphi
    return out


def _support(v, E, target):
    rho = _ball_radius(v, E)
    if target is StripTarget.V_STAR:
        return -rho, rho
    # v' and v*' stay in the ball |w|^2 <= |v|^2 + |v*|^2 <= E
    r = math.sqrt(max(E, 0.0))
    return -r, r


def strip_integral(v, a: float, b: float, E: float, target: StripTarget = StripTarget.V_STAR,
                   n_z: int = 32, **kw) -> float:
    """int 1{v_i.e in [a, b]} 1{|v|^2 + |v*|^2 <= E} |(v - v*).nu| dv* dnu."""
    if b < a:
        raise ValueError("need a <= b")
    lo, hi = _support(np.asarray(v, float), E, target)
    a, b = max(a, lo), min(b, hi)
    if b <= a:
        return 0.0
    # split at v_1 where the V_PRIME density has a kink
    cuts = sorted({a, b} | ({float(v[0])} if a < v[0] < b else set()))
    total = 0.0
    for lo_, hi_ in zip(cuts[:-1], cuts[1:]):
        z, w = _gl_on(lo_, hi_, n_z)
        total += float(np.sum(w * marginal_density(v, E, target, z, **kw)))
    return total


def singular_integral(v, epsilon: float, E: float, power: int = 1,
                      target: StripTarget = StripTarget.V_STAR, n_z: int = 24, **kw) -> float:
    """int (epsilon/|v_i.e|^power ^ 1) 1{energy <= E} |(v - v*).nu| dv* dnu.

    The z = v_i.e axis is cut into the saturated cell |z| <= epsilon^{1/power}
    and dyadic cells beyond it; each cell is integrated against the
    marginal density with Gauss-Legendre nodes.
    """
    if power not in (1, 2):
        raise ValueError("power must be 1 or 2")
    if not 0 < epsilon <= 1:
        raise ValueError("epsilon must lie in (0, 1]")
    v = np.asarray(v, dtype=float)
    lo, hi = _support(v, E, target)
    top = max(abs(lo), abs(hi))
    cap = epsilon ** (1.0 / power)
    edges = [0.0, min(cap, top)]
    while edges[-1] < top:
        edges.append(min(2 * edges[-1], top))
    total = 0.0
    for sign in (1.0, -1.0):
        for e0, e1 in zip(edges[:-1], edges[1:]):
            if e1 <= e0:
                continue
            cuts = [e0, e1]
            if e0 < sign * v[0] < e1:
                cuts = [e0, sign * float(v[0]), e1]
            for c0, c1 in zip(cuts[:-1], cuts[1:]):
                z, w = _gl_on(c0, c1, n_z)
                g = np.minimum(epsilon / np.maximum(z, 1e-300) ** power, 1.0)
                total += float(np.sum(w * g * marginal_density(v, E, target, sign * z, **kw)))
    return total
