"""Experiment orchestration: empirical marginals, the N eps^2 = 1 sweep,
discrepancy-set studies and the file/CLI interfaces."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..densities import DirectionalBump, IsotropicMixture, Profile, ProfileMaxwellian
from ..estimate import Estimate
from ..hardsphere_sim import simulate
from ..pseudotrajectories import (CollisionTree, CreationParams, DiscrepancyClass, InadmissibleCreation,
                                  Mode, build_backward, classify_discrepancy, final_distance)
from ..randomness import ReflectionRecord, make_rng, sample_initial_configuration, sample_uniform_sphere

__all__ = ["ObservableSpec", "OBSERVABLES", "ConfigError", "ExperimentConfig", "BinEstimate",
           "ConvergenceReport", "empirical_observable", "bin_moments", "run_replica",
           "convergence_sweep", "BadSetTable", "bad_set_decay_study", "make_density", "run_cli",
           "config_hash"]


# -- observables ------------------------------------------------------------------------

@dataclass(frozen=True)
class ObservableSpec:
    name: str
    phi: Callable
    degree: int
    moment: str | None = None  # key understood by GridDensity.moment_profile

    def check_growth(self, C: float = 1.0, vmax: float = 10.0, n: int = 2000, seed: int = 0) -> bool:
        """|phi(v)| <= C (1 + |v|)^degree on a random test grid."""
        rng = np.random.default_rng(seed)
        v = rng.uniform(-vmax, vmax, (n, 3))
        bound = C * (1.0 + np.linalg.norm(v, axis=1)) ** self.degree
        return bool(np.all(np.abs(self.phi(v)) <= bound + 1e-12))


def _one(v):
    return np.ones(np.shape(v)[:-1])


def _v1(v):
    return np.asarray(v)[..., 0]


def _v2(v):
    return np.asarray(v)[..., 1]


def _vsq(v):
    v = np.asarray(v)
    return np.sum(v * v, axis=-1)


OBSERVABLES = {
    "one": ObservableSpec("one", _one, 0, "1"),
    "v1": ObservableSpec("v1", _v1, 1, "v1"),
    "v2": ObservableSpec("v2", _v2, 1, None),
    "vsq": ObservableSpec("vsq", _vsq, 2, "|v|^2"),
}


# -- configuration -------------------------------------------------------------------------

class ConfigError(ValueError):
    def __init__(self, field: str, message: str, line: int | None = None):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message
        self.line = line

    def record(self) -> dict:
        out = {"error": "config", "field": self.field, "message": self.message}
        if self.line is not None:
            out["line"] = self.line
        return out


_F0_KEYS = {
    "profile_maxwellian": {"beta", "amplitude", "mode"},
    "isotropic_mixture": {"betas", "weights", "amplitude", "mode"},
    "directional_bump": {"beta", "amplitude"},
}

_SECTIONS = {
    "norm": {"beta": 1.0, "mu": 5.0, "fit_samples": 20000},
    "solver": {"nx": 33, "nc": 20, "nmu": 16, "dt": 0.025, "n_quad": 1024, "tol": 1e-6, "max_iter": 100},
    "badsets": {"s": 1, "r": [1, 2], "t": 0.2, "epsilons": [0.1, 0.03, 0.01], "n_samples": 2000},
    "series": {"R": 2, "E": 40.0, "n_samples": 20000, "x1": [0.5]},
}


def make_density(spec: dict, where: str = "f0"):
    """Density from its config description, e.g. {"kind": "profile_maxwellian", "amplitude": 0.1}."""
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError(f"{where}.kind", "missing field")
    kind = spec["kind"]
    if kind not in _F0_KEYS:
        raise ConfigError(f"{where}.kind", f"unknown density {kind!r}")
    extra = set(spec) - _F0_KEYS[kind] - {"kind"}
    if extra:
        raise ConfigError(f"{where}.{sorted(extra)[0]}", "unknown field")
    prof = Profile(float(spec.get("amplitude", 0.0)), int(spec.get("mode", 1)))
    if kind == "profile_maxwellian":
        return ProfileMaxwellian(float(spec.get("beta", 1.0)), prof)
    if kind == "isotropic_mixture":
        return IsotropicMixture(tuple(spec.get("betas", (0.6, 1.8))),
                                tuple(spec.get("weights", (0.5, 0.5))), prof)
    return DirectionalBump(float(spec.get("beta", 1.0)), float(spec.get("amplitude", 0.5)))


@dataclass
class ExperimentConfig:
    N: list
    times: list
    f0: dict
    replicas: int
    seed: int = 0
    bins: int = 16
    observables: list = field(default_factory=lambda: ["one", "v1", "vsq"])
    epsilon_rule: str = "boltzmann-grad"
    margin: float = 0.05
    check_horizon: bool = True
    norm: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    badsets: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)

    REQUIRED = ("N", "times", "f0", "replicas")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in names:
                raise ConfigError(k, "unknown field")
        for k in cls.REQUIRED:
            if k not in d:
                raise ConfigError(k, "missing field")
        kw = dict(d)
        for sec, defaults in _SECTIONS.items():
            given = kw.get(sec, {}) or {}
            if not isinstance(given, dict):
                raise ConfigError(sec, "must be an object")
            for k in given:
                if k not in defaults:
                    raise ConfigError(f"{sec}.{k}", "unknown field")
            kw[sec] = {**defaults, **given}
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<json>", exc.msg, exc.lineno) from None
        return cls.from_dict(d)

    def validate(self):
        if not isinstance(self.N, list) or not self.N or any(not isinstance(n, int) or n < 1 for n in self.N):
            raise ConfigError("N", "need a non-empty list of positive integers")
        if not isinstance(self.times, list) or not self.times or any(
                not isinstance(t, (int, float)) or t < 0 for t in self.times):
            raise ConfigError("times", "need a non-empty list of non-negative times")
        if not isinstance(self.replicas, int) or self.replicas < 1:
            raise ConfigError("replicas", "must be a positive integer")
        if not isinstance(self.bins, int) or self.bins < 1:
            raise ConfigError("bins", "must be a positive integer")
        if self.epsilon_rule != "boltzmann-grad":
            raise ConfigError("epsilon_rule", "only 'boltzmann-grad' (eps = N^-1/2) is supported")
        for o in self.observables:
            if o not in OBSERVABLES:
                raise ConfigError("observables", f"unknown observable {o!r}")
        make_density(self.f0)

    def epsilon(self, N: int) -> float:
        return 1.0 / math.sqrt(N)

    def density(self):
        return make_density(self.f0)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def config_hash(cfg: ExperimentConfig) -> str:
    text = json.dumps(cfg.as_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


# -- empirical observables ------------------------------------------------------------------------

@dataclass(frozen=True)
class BinEstimate(Estimate):
    empty: bool = False


def _bin_index(x1, edges):
    return np.clip(np.searchsorted(edges, x1, side="right") - 1, 0, len(edges) - 2)


def bin_moments(x, v, edges, phis) -> np.ndarray:
    """Per-bin (1 / (N |bin|)) sum_i phi(v_i) 1{x_i in bin} for each phi; shape (len(phis), bins)."""
    N = len(x)
    widths = np.diff(edges)
    idx = _bin_index(x[:, 0], edges)
    out = np.empty((len(phis), len(widths)))
    for k, phi in enumerate(phis):
        out[k] = np.bincount(idx, weights=phi(v), minlength=len(widths)) / (N * widths)
    return out


def empirical_observable(ensemble, t: float, x_bin, phi) -> BinEstimate:
    """Average over replicas of (1/|bin|) sum_i phi(v_i(t)) 1{x_i(t) in bin} / N.

    ensemble: iterable of snapshots (x, v) at time t, or a mapping
    time -> list of snapshots.
    """
    snaps = ensemble[t] if isinstance(ensemble, dict) else list(ensemble)
    if not snaps:
        raise ValueError("empty ensemble")
    a, b = float(x_bin[0]), float(x_bin[1])
    per, hits = [], 0
    for x, v in snaps:
        x = np.asarray(x)
        inside = (x[:, 0] >= a) & ((x[:, 0] < b) | ((b >= 1.0) & (x[:, 0] <= b)))
        hits += int(inside.sum())
        per.append(float(np.sum(phi(np.asarray(v)[inside]))) / (len(x) * (b - a)))
    e = Estimate.from_samples(per)
    return BinEstimate(e.mean, e.stderr, e.n, empty=hits == 0)


def _replica_seed(seed: int, N: int) -> int:
    return int(np.random.SeedSequence([seed, N]).generate_state(1)[0])


def run_replica(args) -> np.ndarray:
    """One hard-sphere replica; returns bin moments of shape (times, observables, bins)."""
    f0_spec, N, replica, seed, times, edges, obs_names = args
    f0 = make_density(f0_spec)
    eps = 1.0 / math.sqrt(N)
    rng = make_rng(seed, N, replica)
    state = sample_initial_configuration(rng, N, eps, f0, seed=_replica_seed(seed, N), replica=replica)
    phis = [OBSERVABLES[o].phi for o in obs_names]
    out = np.empty((len(times), len(phis), len(edges) - 1))
    order = {t: k for k, t in enumerate(times)}

    def observer(t, st):
        out[order[t]] = bin_moments(st.x, st.v, edges, phis)

    simulate(state, max(times), observer=observer, sample_times=times)
    return out


def _map(fn, jobs, threads: int):
    if threads <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * threads))))


def simulate_marginals(cfg: ExperimentConfig, N: int, threads: int = 1, progress=None) -> np.ndarray:
    """Per-replica bin moments for one N: shape (replicas, times, observables, bins)."""
    edges = np.linspace(0.0, 1.0, cfg.bins + 1)
    times = sorted(float(t) for t in cfg.times)
    jobs = [(cfg.f0, N, rep, cfg.seed, times, edges, list(cfg.observables)) for rep in range(cfg.replicas)]
    res = _map(run_replica, jobs, threads)
    if progress:
        progress(f"N={N}: {len(res)} replicas")
    return np.stack(res)


# -- convergence sweep -----------------------------------------------------------------------------

@dataclass
class ConvergenceReport:
    N: list
    times: list
    observables: list
    bins: int
    entries: list  # dicts per (N, t, observable)
    verdicts: list  # dicts per (t, observable)
    fitted_T: float | None = None

    def gap(self, N, t, obs) -> tuple[float, float]:
        for e in self.entries:
            if e["N"] == N and e["t"] == t and e["observable"] == obs:
                return e["gap"], e["uncertainty"]
        raise KeyError((N, t, obs))

    @property
    def passed(self) -> bool:
        return all(v["non_increasing"] and v["final_within_2sigma"] for v in self.verdicts)

    def as_dict(self) -> dict:
        return {"N": self.N, "times": self.times, "observables": self.observables, "bins": self.bins,
                "fitted_T": self.fitted_T, "entries": self.entries, "verdicts": self.verdicts,
                "passed": self.passed}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=1)


def _solver_grid(cfg, coarse=False):
    from ..boltzmann_solver import GridSpec

    s = cfg.solver
    if coarse:
        return GridSpec(nx=max(3, (s["nx"] + 1) // 2), nc=s["nc"], nmu=s["nmu"], dt=2 * s["dt"],
                        n_quad=max(64, s["n_quad"] // 2), seed=cfg.seed + 1)
    return GridSpec(nx=s["nx"], nc=s["nc"], nmu=s["nmu"], dt=s["dt"], n_quad=s["n_quad"], seed=cfg.seed)


def reference_profiles(cfg: ExperimentConfig, with_error: bool = True):
    """Bin averages of the Boltzmann reference: (values, error) of shape (times, observables, bins)."""
    from ..boltzmann_solver import picard_solve

    f0 = cfg.density()
    times = sorted(float(t) for t in cfg.times)
    edges = np.linspace(0.0, 1.0, cfg.bins + 1)
    T_end = max(times)

    def profiles(grid):
        if T_end == 0:
            from ..boltzmann_solver import GridDensity, _GridTransport
            proto = GridDensity.on_spec(grid, f0.speed_cap(1e-8), beta=f0.envelope()[1])
            snaps = {0.0: proto.with_values(_GridTransport(proto).apply(f0, 0.0))}
        else:
            snaps = picard_solve(f0, T_end, tol=cfg.solver["tol"], grid=grid, snapshot_times=times,
                                 max_iter=int(cfg.solver["max_iter"])).snapshots
        out = np.empty((len(times), len(cfg.observables), cfg.bins))
        for i, t in enumerate(times):
            G = snaps[t]
            for k, o in enumerate(cfg.observables):
                m = OBSERVABLES[o].moment
                out[i, k] = G.bin_average(m, edges) if m is not None else 0.0
        return out

    fine = profiles(_solver_grid(cfg))
    err = np.abs(fine - profiles(_solver_grid(cfg, coarse=True))) if with_error else np.zeros_like(fine)
    return fine, err


def convergence_sweep(cfg: ExperimentConfig, threads: int = 1, progress=None,
                      fitted_T: float | None = None, marginals: dict | None = None) -> ConvergenceReport:
    """Empirical marginals for every N against the Boltzmann reference.

    gap = RMS over bins of (empirical - reference); its uncertainty is the
    RMS over bins of sqrt(stderr^2 + reference error^2), the reference
    error being the difference between the solver on the configured grid
    and on a coarser one.  Verdicts: gaps non-increasing in N within the
    combined uncertainty of consecutive entries, and the gap at the
    largest N below twice its uncertainty.
    """
    times = sorted(float(t) for t in cfg.times)
    if cfg.check_horizon and fitted_T is not None and max(times) > fitted_T:
        raise ConfigError("times", f"t={max(times)} exceeds the fitted horizon T={fitted_T:.4g}")
    ref, ref_err = reference_profiles(cfg)
    Ns = sorted(cfg.N)
    entries = []
    table = {}
    for N in Ns:
        data = marginals[N] if marginals is not None and N in marginals else simulate_marginals(cfg, N, threads, progress)
        mean = data.mean(axis=0)
        se = data.std(axis=0, ddof=1) / math.sqrt(len(data)) if len(data) > 1 else np.zeros_like(mean)
        for i, t in enumerate(times):
            for k, o in enumerate(cfg.observables):
                diff = mean[i, k] - ref[i, k]
                unc = np.sqrt(se[i, k] ** 2 + ref_err[i, k] ** 2)
                gap = float(np.sqrt(np.mean(diff ** 2)))
                u = float(np.sqrt(np.mean(unc ** 2)))
                table[(N, t, o)] = (gap, u)
                entries.append({"N": N, "epsilon": cfg.epsilon(N), "t": t, "observable": o, "gap": gap,
                                "uncertainty": u, "empirical": mean[i, k].tolist(),
                                "stderr": se[i, k].tolist(), "reference": ref[i, k].tolist(),
                                "reference_error": ref_err[i, k].tolist()})
    verdicts = []
    for t in times:
        for o in cfg.observables:
            seq = [table[(N, t, o)] for N in Ns]
            steps = [b[0] <= a[0] + math.hypot(a[1], b[1]) for a, b in zip(seq[:-1], seq[1:])]
            verdicts.append({"t": t, "observable": o, "gaps": [g for g, _ in seq],
                             "uncertainties": [u for _, u in seq], "non_increasing": all(steps),
                             "final_within_2sigma": seq[-1][0] < 2 * seq[-1][1]})
    return ConvergenceReport(Ns, times, list(cfg.observables), cfg.bins, entries, verdicts, fitted_T)


# -- discrepancy-set study ---------------------------------------------------------------------------

CLASS_NAMES = [c.name for c in DiscrepancyClass]


@dataclass
class BadSetTable:
    s: int
    r: int
    t: float
    epsilons: list
    counts: dict  # epsilon -> Counter of class names (plus INADMISSIBLE)
    n_samples: int
    distances: dict = field(default_factory=dict)  # epsilon -> final distances of Clean samples

    def admissible(self, eps) -> int:
        return self.n_samples - self.counts[eps].get("INADMISSIBLE", 0)

    def frequency(self, eps, cls: str) -> tuple[float, float]:
        """Fraction among admissible samples (all samples for INADMISSIBLE) with binomial stderr."""
        n = self.n_samples if cls == "INADMISSIBLE" else self.admissible(eps)
        if n == 0:
            return 0.0, 0.0
        p = self.counts[eps].get(cls, 0) / n
        return p, math.sqrt(p * (1 - p) / n)

    def rows(self):
        out = []
        for eps in self.epsilons:
            for cls in CLASS_NAMES + ["INADMISSIBLE"]:
                p, se = self.frequency(eps, cls)
                out.append((eps, cls, p, se))
        return out

    def clean_distance(self, eps) -> Estimate | None:
        d = self.distances.get(eps, [])
        return Estimate.from_samples(d) if len(d) else None


def _study_sample(rng, s, r, t, margin, beta):
    while True:
        x = rng.random((s, 3))
        if s < 2:
            break
        d = x[:, None, :] - x[None, :, :]
        d[..., 1:] -= np.round(d[..., 1:])
        dist = np.linalg.norm(d, axis=-1) + np.eye(s) * 10
        if dist.min() > margin:
            break
    v = rng.standard_normal((s, 3)) / math.sqrt(beta)
    times = np.sort(rng.random(r))[::-1] * t
    nu = sample_uniform_sphere(rng, r)
    vbar = rng.standard_normal((r, 3)) / math.sqrt(beta)
    return x, v, CreationParams(times, nu, vbar)


def _signed_trees(s, r):
    from ..duhamel_mc import signed_trees

    return signed_trees(s, r)


def bad_set_decay_study(s: int, r: int, t: float, tree: CollisionTree | None = None, epsilons=(0.1, 0.03, 0.01),
                        n_samples: int = 2000, seed: int = 0, margin: float = 0.05, beta: float = 1.0,
                        keep_distances: bool = False) -> BadSetTable:
    """Classify common samples of both modes for each epsilon.

    Sample i uses `tree`, or the i-th signed tree of order r in rotation
    when tree is None.  Positions are uniform (pairwise margin for s >= 2),
    velocities and creation velocities Maxwellian, creation times uniform
    on the simplex, directions uniform on the sphere.  Samples whose
    epsilon-mode creation is inadmissible are counted separately.
    """
    if r > 2:
        raise ValueError("the study supports r <= 2")
    trees = [tree] if tree is not None else _signed_trees(s, r)
    if any(tr.s != s or tr.r != r for tr in trees):
        raise ValueError("tree does not match (s, r)")
    counts = {eps: Counter() for eps in epsilons}
    dists = {eps: [] for eps in epsilons}
    for i in range(n_samples):
        tr = trees[i % len(trees)]
        rng = make_rng(seed, 0xBAD, s, r, i)
        x, v, params = _study_sample(rng, s, r, t, margin, beta)
        recs = [ReflectionRecord(seed, (i << 4) + k) for k in range(s + r)]
        for eps in epsilons:
            try:
                e = build_backward(Mode.EPSILON, t, x, v, tr, params, recs, eps, flip_nu=True)
            except InadmissibleCreation:
                counts[eps]["INADMISSIBLE"] += 1
                continue
            z = build_backward(Mode.ZERO, t, x, v, tr, params, recs, eps, flip_nu=True)
            c = classify_discrepancy(e.log, z.log, eps)
            counts[eps][c.name] += 1
            if keep_distances and c is DiscrepancyClass.CLEAN:
                dists[eps].append(final_distance(e, z))
    return BadSetTable(s, r, t, list(epsilons), counts, n_samples, dists if keep_distances else {})


def run_cli(argv=None) -> int:
    from .cli import run_cli as _run

    return _run(argv)
