"""Monte Carlo estimate container shared by the estimators."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Estimate:
    mean: float
    stderr: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("an estimate needs at least one sample")

    @classmethod
    def from_samples(cls, x) -> "Estimate":
        x = np.asarray(x, dtype=float).ravel()
        n = x.size
        sd = float(x.std(ddof=1)) if n > 1 else 0.0
        return cls(float(x.mean()), sd / math.sqrt(n), n)

    def scaled(self, c: float) -> "Estimate":
        return Estimate(c * self.mean, abs(c) * self.stderr, self.n)

    def __add__(self, other: "Estimate") -> "Estimate":
        # independent estimates: errors add in quadrature
        return Estimate(self.mean + other.mean, math.hypot(self.stderr, other.stderr),
                        min(self.n, other.n))

    def __sub__(self, other: "Estimate") -> "Estimate":
        return self + other.scaled(-1.0)

    def z_against(self, value: float, extra_stderr: float = 0.0) -> float:
        s = math.hypot(self.stderr, extra_stderr)
        return (self.mean - value) / s if s > 0 else (0.0 if self.mean == value else math.inf)

    def as_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n": self.n}


def combine(parts) -> Estimate:
    """Sum of independent estimates."""
    parts = list(parts)
    if not parts:
        return Estimate(0.0, 0.0, 1)
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out
