"""One-particle densities on [0,1] x T^2 x R^3.

A density can be evaluated at arrays of (x, v) and sampled.  Every family
here is invariant in (x2, x3); `axisymmetric` flags densities that depend on
v only through (|v|, v.e/|v|), the class handled by the reduced grid solver.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats


def maxwellian(v, beta: float) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return (beta / (2 * math.pi)) ** 1.5 * np.exp(-0.5 * beta * np.sum(v * v, axis=-1))


class DensityFunction:
    """Evaluation contract (x, v) -> f >= 0 with a Gaussian envelope."""

    axisymmetric = True
    x_invariant = True  # invariance in x2, x3

    def __call__(self, x, v) -> np.ndarray:
        raise NotImplementedError

    def envelope(self) -> tuple[float, float]:
        """(C, beta) with f <= C exp(-beta |v|^2 / 2)."""
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, n: int):
        raise NotImplementedError

    def reduced(self, x1, speed, cosine) -> np.ndarray:
        """Value at slab coordinate x1 and velocity speed*(cosine, sin, 0)."""
        x1, speed, cosine = np.broadcast_arrays(*map(np.asarray, (x1, speed, cosine)))
        s = np.sqrt(np.maximum(1.0 - cosine ** 2, 0.0))
        v = np.stack([speed * cosine, speed * s, np.zeros_like(speed)], axis=-1)
        x = np.stack([x1, np.zeros_like(x1), np.zeros_like(x1)], axis=-1)
        return self(x, v)

    def speed_cap(self, tail: float = 1e-8) -> float:
        """Speed beyond which the envelope carries less than `tail` of its mass."""
        _, b = self.envelope()
        return float(stats.chi(3).isf(tail)) / math.sqrt(b)


@dataclass
class Profile:
    """Density profile rho(x1) = 1 + a cos(pi k x1), normalised on [0,1]."""

    amplitude: float = 0.0
    mode: int = 1

    def __call__(self, x1):
        # cos(pi k x1) integrates to zero on [0,1], so the mean stays 1
        return 1.0 + self.amplitude * np.cos(math.pi * self.mode * np.asarray(x1, dtype=float))

    @property
    def maximum(self) -> float:
        return 1.0 + abs(self.amplitude)

    def sample(self, rng, n):
        out = np.empty(n)
        filled = 0
        while filled < n:
            m = 2 * (n - filled) + 8
            x = rng.random(m)
            keep = rng.random(m) * self.maximum < self(x)
            got = x[keep][: n - filled]
            out[filled:filled + got.size] = got
            filled += got.size
        return out


@dataclass
class ProfileMaxwellian(DensityFunction):
    """rho(x1) M_beta(v): isotropic in direction, hence compatible with the wall law."""

    beta: float = 1.0
    profile: Profile = field(default_factory=Profile)

    def __call__(self, x, v):
        x = np.asarray(x, dtype=float)
        return self.profile(x[..., 0]) * maxwellian(v, self.beta)

    def envelope(self):
        return self.profile.maximum * (self.beta / (2 * math.pi)) ** 1.5, self.beta

    def sample(self, rng, n):
        x = np.empty((n, 3))
        x[:, 0] = self.profile.sample(rng, n)
        x[:, 1:] = rng.random((n, 2))
        v = rng.standard_normal((n, 3)) / math.sqrt(self.beta)
        return x, v


@dataclass
class IsotropicMixture(DensityFunction):
    """rho(x1) sum_k w_k M_{beta_k}(v): isotropic but not an equilibrium."""

    betas: tuple = (0.6, 1.8)
    weights: tuple = (0.5, 0.5)
    profile: Profile = field(default_factory=Profile)

    def __call__(self, x, v):
        x = np.asarray(x, dtype=float)
        m = sum(w * maxwellian(v, b) for w, b in zip(self.weights, self.betas))
        return self.profile(x[..., 0]) * m

    def envelope(self):
        b = min(self.betas)
        c = sum(w * (bk / (2 * math.pi)) ** 1.5 for w, bk in zip(self.weights, self.betas))
        return self.profile.maximum * c, b

    def sample(self, rng, n):
        x = np.empty((n, 3))
        x[:, 0] = self.profile.sample(rng, n)
        x[:, 1:] = rng.random((n, 2))
        k = rng.choice(len(self.betas), size=n, p=np.asarray(self.weights) / sum(self.weights))
        v = rng.standard_normal((n, 3)) / np.sqrt(np.asarray(self.betas)[k])[:, None]
        return x, v


@dataclass
class DirectionalBump(DensityFunction):
    """M_beta(v) (1 + a (c^2 - 1/3)) with c = v.e/|v|; violates wall compatibility."""

    beta: float = 1.0
    amplitude: float = 0.5

    def _angular(self, c):
        return 1.0 + self.amplitude * (c * c - 1.0 / 3.0)

    def __call__(self, x, v):
        v = np.asarray(v, dtype=float)
        sp = np.linalg.norm(v, axis=-1)
        c = np.where(sp > 0, v[..., 0] / np.where(sp > 0, sp, 1.0), 0.0)
        return maxwellian(v, self.beta) * self._angular(c)

    def envelope(self):
        return (self.beta / (2 * math.pi)) ** 1.5 * (1 + abs(self.amplitude)), self.beta

    def sample(self, rng, n):
        x = rng.random((n, 3))
        out = np.empty((n, 3))
        filled = 0
        top = 1 + abs(self.amplitude)
        while filled < n:
            v = rng.standard_normal((2 * n, 3)) / math.sqrt(self.beta)
            c = v[:, 0] / np.linalg.norm(v, axis=1)
            keep = rng.random(2 * n) * top < self._angular(c)
            got = v[keep][: n - filled]
            out[filled:filled + len(got)] = got
            filled += len(got)
        return x, out


@dataclass
class GaussianFamily:
    """Hierarchy f^s = exp(-mu s - beta/2 |v_s|^2); its X-norm is exactly 1."""

    beta: float
    mu: float

    def __call__(self, s: int, x, v) -> np.ndarray:
        """Values at velocities v of shape (..., s, 3); positions are ignored."""
        v = np.asarray(v, dtype=float)
        return np.exp(-self.mu * s - 0.5 * self.beta * np.sum(v * v, axis=(-1, -2)))


def mass_profile_check(f: DensityFunction, x1: float, vmax: float | None = None) -> float:
    """int f(x1, v) dv for an axisymmetric density, by adaptive quadrature."""
    vmax = vmax or f.speed_cap(1e-12)
    g = lambda c, s: 2 * math.pi * s * s * float(f.reduced(x1, s, c))
    val, _ = integrate.dblquad(g, 0, vmax, -1, 1, epsabs=1e-10)
    return val
