"""Slab/torus arithmetic for the domain [0,1] x T^2.

The first coordinate is the slab direction bounded by two walls, the other
two are periodic with period 1.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

WALL_TOL = 1e-12
E1 = np.array([1.0, 0.0, 0.0])


class Wall(enum.Enum):
    X1_ZERO = 0
    X1_ONE = 1


def gamma_of(wall: Wall) -> int:
    """Sign of the inward normal along e at a wall: +1 at x1=0, -1 at x1=1."""
    return 1 if wall is Wall.X1_ZERO else -1


@dataclass(frozen=True)
class WallHit:
    time: float
    wall: Wall
    gamma: int


class ContractViolation(ValueError):
    pass


def wrap_torus(x2):
    """Reduce torus coordinates into [0, 1)."""
    y = np.mod(x2, 1.0)
    # np.mod can return exactly 1.0 for tiny negative inputs
    return np.where(y >= 1.0, 0.0, y)


def normalize(x) -> np.ndarray:
    x = np.array(x, dtype=float)
    x[..., 1:] = wrap_torus(x[..., 1:])
    return x


def wall_hit_time(x, v) -> WallHit | None:
    """First strictly positive time at which x1 + t v1 reaches 0 or 1."""
    x1, v1 = float(x[0]), float(v[0])
    if v1 > 0.0:
        t = (1.0 - x1) / v1
        wall = Wall.X1_ONE
    elif v1 < 0.0:
        t = -x1 / v1
        wall = Wall.X1_ZERO
    else:
        return None
    return WallHit(max(t, 0.0), wall, gamma_of(wall))


def wall_hit_times(x1: np.ndarray, v1: np.ndarray) -> np.ndarray:
    """Vectorized wall_hit_time returning inf where v1 == 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(v1 > 0, (1.0 - x1) / v1, np.where(v1 < 0, -x1 / v1, np.inf))
    return np.maximum(t, 0.0)


def advect(x, v, t: float) -> np.ndarray:
    """Free flight for time t; the caller guarantees no wall is crossed."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    y = x + t * v
    x1 = y[..., 0]
    if np.any(x1 < -WALL_TOL) or np.any(x1 > 1.0 + WALL_TOL):
        raise ContractViolation(f"flight leaves the slab: x1={x1}")
    y[..., 0] = np.clip(x1, 0.0, 1.0)
    y[..., 1:] = wrap_torus(y[..., 1:])
    return y


def minimum_image(d):
    """Map torus components of a displacement into (-1/2, 1/2]."""
    d = np.array(d, dtype=float)
    t = d[..., 1:]
    t -= np.ceil(t - 0.5)
    return d


def minimum_image_displacement(a, b) -> np.ndarray:
    """Shortest displacement from a to b; the slab component never wraps."""
    return minimum_image(np.asarray(b, dtype=float) - np.asarray(a, dtype=float))


def slab_torus_distance(a, b):
    return np.linalg.norm(minimum_image_displacement(a, b), axis=-1)


def lattice_offsets(radius: float) -> np.ndarray:
    """Integer vectors k in Z^2 whose unit cell meets the disk of given radius.

    The cell of k is the square of side 1 centred at k.  A point of the
    central cell displaced by at most `radius` can only land in these cells,
    so the set is exactly what a collision search over a flight of that
    length needs.
    """
    R = int(math.ceil(radius)) + 1
    k = np.arange(-R, R + 1)
    k2, k3 = np.meshgrid(k, k, indexing="ij")
    gap2 = np.maximum(np.abs(k2) - 0.5, 0.0) ** 2 + np.maximum(np.abs(k3) - 0.5, 0.0) ** 2
    keep = gap2 <= radius * radius
    return np.stack([k2[keep], k3[keep]], axis=-1)


def unfold_images(b, radius: float) -> np.ndarray:
    """Translates b + (0, k2, k3) on the cover [0,1] x R^2, k=0 first."""
    if radius < 0:
        raise ContractViolation("radius must be non-negative")
    b = np.asarray(b, dtype=float)
    k = lattice_offsets(radius)
    order = np.lexsort((k[:, 1], k[:, 0], (k ** 2).sum(axis=1)))
    k = k[order]
    out = np.repeat(b[None, :], len(k), axis=0)
    out[:, 1:] += k
    return out


def wall_distance(x1) -> np.ndarray:
    x1 = np.asarray(x1, dtype=float)
    return np.minimum(x1, 1.0 - x1)
