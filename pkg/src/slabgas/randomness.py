"""Seeded sampling: wall directions, Maxwellians, initial configurations and
per-particle reflection records.

Every random stream is keyed by integers, so a run is reproducible bit for
bit from its seed.  Reflection records are generated lazily from a Philox
stream keyed by (seed, stream id, side); entry j of a side is the j-th draw
of that stream whatever the access pattern.
"""
from __future__ import annotations

import math

import numpy as np

from .geometry import E1, minimum_image

C3 = 1.0 / math.pi  # normalisation of the cosine law on the half sphere

_MASK63 = (1 << 63) - 1
_MASK64 = (1 << 64) - 1
_BLOCK = 8


class ZeroSpeed(ValueError):
    pass


class RejectionBudgetExceeded(RuntimeError):
    pass


def make_rng(seed: int, *tags: int) -> np.random.Generator:
    """Independent generator for (seed, tags...)."""
    ss = np.random.SeedSequence([int(seed) & _MASK64, *[int(t) & _MASK64 for t in tags]])
    return np.random.Generator(np.random.Philox(ss))


def stream_id(replica: int, particle: int) -> int:
    return (int(replica) << 24) | int(particle)


def sample_diffuse_direction(rng: np.random.Generator, sign: int = 1, size=None) -> np.ndarray:
    """Unit vectors with law c3 (sign * w.e)_+ dw.

    The cosine u = sign * w.e has density 2u on [0,1], drawn as sqrt(U);
    the azimuth is uniform and independent.
    """
    shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
    U = rng.random(shape + (2,))
    return _directions_from_uniforms(U[..., 0], U[..., 1], sign)


def _directions_from_uniforms(U1, U2, sign) -> np.ndarray:
    u = np.sqrt(U1)
    s = np.sqrt(np.maximum(1.0 - u * u, 0.0))
    phi = 2.0 * math.pi * U2
    out = np.stack([sign * u, s * np.cos(phi), s * np.sin(phi)], axis=-1)
    return out


def sample_maxwellian(rng: np.random.Generator, beta: float, size=None) -> np.ndarray:
    if not beta > 0:
        raise ValueError("beta must be positive")
    shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
    return rng.standard_normal(shape + (3,)) / math.sqrt(beta)


def sample_uniform_sphere(rng: np.random.Generator, size=None) -> np.ndarray:
    shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
    g = rng.standard_normal(shape + (3,))
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def sample_uniform_ball(rng: np.random.Generator, radius, size=None) -> np.ndarray:
    shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
    d = sample_uniform_sphere(rng, shape)
    r = np.asarray(radius, dtype=float) * rng.random(shape) ** (1.0 / 3.0)
    return d * r[..., None]


class _Stream:
    """Append-only cache of directions drawn from one keyed Philox stream.

    The cache content is a pure function of the key, so copies of a record
    may share it safely.
    """

    __slots__ = ("key", "sign", "cache", "_gen")

    def __init__(self, key: int, sign: int, preset=None):
        self.key = key
        self.sign = sign
        self.cache: list[np.ndarray] = [] if preset is None else [np.asarray(w, float) for w in preset]
        self._gen = None

    def entry(self, j: int) -> np.ndarray:
        while j >= len(self.cache):
            if self._gen is None:
                self._gen = np.random.Generator(np.random.Philox(key=self.key))
                # skip entries that were supplied up front
                skip = len(self.cache)
                if skip:
                    self._gen.random(2 * skip)
            U = self._gen.random((_BLOCK, 2))
            W = _directions_from_uniforms(U[:, 0], U[:, 1], self.sign)
            self.cache.extend(W)
        return self.cache[j]


def _key(seed: int, stream: int, side: int) -> int:
    return (int(seed) & _MASK64) | ((((int(stream) & _MASK63) << 1) | side) << 64)


class ReflectionRecord:
    """Two-sided sequence of wall directions attached to one particle.

    `future` entries have w.e > 0 and are used by forward reflections;
    `past` entries have w.e < 0 and are recorded by forward reflections or
    used by backward ones.  Entries never touched are drawn lazily.
    `position` counts forward reflections minus backward ones.
    """

    __slots__ = ("seed", "stream", "_fut", "_past", "_pushed", "_stack", "_jf", "_jp", "position")

    def __init__(self, seed: int, stream: int, future=None, past=None):
        self.seed = int(seed)
        self.stream = int(stream)
        self._fut = _Stream(_key(seed, stream, 0), +1, future)
        self._past = _Stream(_key(seed, stream, 1), -1, past)
        self._pushed: list[np.ndarray] = []  # returned to the future side, last = next
        self._stack: list[np.ndarray] = []  # recorded past, last = most recent
        self._jf = 0
        self._jp = 0
        self.position = 0

    def copy(self) -> "ReflectionRecord":
        r = ReflectionRecord.__new__(ReflectionRecord)
        r.seed, r.stream = self.seed, self.stream
        r._fut, r._past = self._fut, self._past
        r._pushed = list(self._pushed)
        r._stack = list(self._stack)
        r._jf, r._jp, r.position = self._jf, self._jp, self.position
        return r

    def peek_future(self, j: int = 1) -> np.ndarray:
        """Entry w^j for j >= 1 without consuming it."""
        n = len(self._pushed)
        if j <= n:
            return self._pushed[n - j]
        return self._fut.entry(self._jf + j - n - 1)

    def peek_past(self, j: int = 1) -> np.ndarray:
        """Entry w^{-j} for j >= 1 without consuming it."""
        n = len(self._stack)
        if j <= n:
            return self._stack[n - j]
        return self._past.entry(self._jp + j - n - 1)

    def pop_future(self) -> np.ndarray:
        if self._pushed:
            w = self._pushed.pop()
        else:
            w = self._fut.entry(self._jf)
            self._jf += 1
        return w

    def pop_past(self) -> np.ndarray:
        if self._stack:
            w = self._stack.pop()
        else:
            w = self._past.entry(self._jp)
            self._jp += 1
        return w

    @property
    def past(self) -> list[np.ndarray]:
        return list(reversed(self._stack))

    def __repr__(self):
        return f"ReflectionRecord(seed={self.seed}, stream={self.stream}, position={self.position})"


def consume_reflection(record: ReflectionRecord, v_in, gamma: int):
    """Forward wall reflection driven by the next future entry.

    Returns (v_out, record); the record is updated in place, its past gains
    gamma * v_in / |v_in|.
    """
    v_in = np.asarray(v_in, dtype=float)
    speed = math.sqrt(float(v_in @ v_in))
    if speed == 0.0:
        raise ZeroSpeed("reflection of a particle at rest")
    w = record.pop_future()
    record._stack.append(gamma * v_in / speed)
    record.position += 1
    v_out = _rescale(gamma * w, speed)
    return v_out, record


def consume_reflection_backward(record: ReflectionRecord, v_out, gamma: int):
    """Inverse of consume_reflection: recover the incoming velocity.

    The incoming velocity is |v| gamma w^{-1}; the outgoing direction is
    pushed back onto the future side so that a forward replay is exact.
    """
    v_out = np.asarray(v_out, dtype=float)
    speed = math.sqrt(float(v_out @ v_out))
    if speed == 0.0:
        raise ZeroSpeed("reflection of a particle at rest")
    w = record.pop_past()
    record._pushed.append(gamma * v_out / speed)
    record.position -= 1
    v_in = _rescale(gamma * w, speed)
    return v_in, record


def _rescale(direction: np.ndarray, speed: float) -> np.ndarray:
    v = direction * (speed / math.sqrt(float(direction @ direction)))
    # one correction step so that |v| equals speed to the last bits
    return v * (speed / math.sqrt(float(v @ v)))


def expected_acceptance(N: int, epsilon: float) -> float:
    """Crude acceptance estimate of whole-configuration rejection."""
    p = 4.0 / 3.0 * math.pi * epsilon ** 3
    return math.exp(-0.5 * N * (N - 1) * p)


def sample_initial_configuration(rng: np.random.Generator, N: int, epsilon: float, f0,
                                 seed: int = 0, replica: int = 0, method: str = "auto",
                                 max_attempts: int = 100000):
    """N particles i.i.d. from f0 conditioned on pairwise distance > epsilon.

    method="exact" rejects whole configurations (exact conditioned law);
    method="sequential" redraws each new particle until it clears the ones
    already placed, which is only approximately the conditioned law but
    works at densities where whole rejection is hopeless.  "auto" uses the
    exact scheme whenever its expected acceptance is at least 1e-3.
    """
    from .hardsphere_sim import SystemState

    if method == "auto":
        method = "exact" if expected_acceptance(N, epsilon) >= 1e-3 else "sequential"
    if method == "exact":
        x, v = _exact_rejection(rng, N, epsilon, f0, max_attempts)
    elif method == "sequential":
        x, v = _sequential(rng, N, epsilon, f0, max_attempts)
    else:
        raise ValueError(f"unknown method {method!r}")
    records = [ReflectionRecord(seed, stream_id(replica, i)) for i in range(N)]
    return SystemState(x=x, v=v, records=records, epsilon=float(epsilon), time=0.0)


def _pair_ok(x: np.ndarray, epsilon: float) -> np.ndarray:
    """For a batch (B, N, 3) of configurations, True where no pair overlaps."""
    d = minimum_image(x[:, :, None, :] - x[:, None, :, :])
    d2 = np.einsum("bijk,bijk->bij", d, d)
    n = x.shape[1]
    iu = np.triu_indices(n, 1)
    return np.all(d2[:, iu[0], iu[1]] > epsilon * epsilon, axis=1)


def _exact_rejection(rng, N, epsilon, f0, max_attempts):
    if N <= 1 or epsilon == 0.0:
        return f0.sample(rng, N)
    batch = max(1, min(max_attempts, int(2.0 / max(expected_acceptance(N, epsilon), 1e-6)), 4096))
    tried = 0
    while tried < max_attempts:
        b = min(batch, max_attempts - tried)
        x, v = f0.sample(rng, b * N)
        x = x.reshape(b, N, 3)
        v = v.reshape(b, N, 3)
        ok = _pair_ok(x, epsilon)
        hit = np.flatnonzero(ok)
        if hit.size:
            return x[hit[0]].copy(), v[hit[0]].copy()
        tried += b
    raise RejectionBudgetExceeded(f"no admissible configuration in {max_attempts} attempts")


def _sequential(rng, N, epsilon, f0, max_attempts):
    x = np.empty((N, 3))
    v = np.empty((N, 3))
    eps2 = epsilon * epsilon
    for i in range(N):
        tries = 0
        while True:
            xs, vs = f0.sample(rng, 16)
            if i == 0 or epsilon == 0.0:
                good = 0
            else:
                d = minimum_image(xs[:, None, :] - x[None, :i, :])
                ok = np.all(np.einsum("bjk,bjk->bj", d, d) > eps2, axis=1)
                hits = np.flatnonzero(ok)
                good = hits[0] if hits.size else -1
            if good >= 0:
                x[i], v[i] = xs[good], vs[good]
                break
            tries += 16
            if tries >= max_attempts:
                raise RejectionBudgetExceeded(f"particle {i} could not be placed")
    return x, v
