"""Backward pseudotrajectories driven by a collision tree.

Particles are labelled 0..s+r-1.  The first s are the roots, present at
the final time t; particle s+j is created at time times[j] next to its
parent a[j] < s+j.  Both builders run from time t down to 0:

* EPSILON: hard spheres of diameter epsilon, the new particle sits at
  x_parent + epsilon nu, and the particles collide between creations;
* ZERO: point particles at x_parent that never see each other.

Reflections consume the past side of each particle's ReflectionRecord, so
the two modes read homologous wall directions.

Event log text format, one event per line:

    <time> <kind> <ids> <info>

time is printed with 17 significant digits, ids is a comma separated list
(or "-"), info is a JSON object.  Kinds: root, create, reflect, collide,
overlap, checkpoint, end.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import minimum_image, wall_distance, wrap_torus
from .hardsphere_sim import EventEngine, EventKind, SystemState, _image_roots
from .randomness import ReflectionRecord, consume_reflection_backward


class Mode(enum.Enum):
    EPSILON = "epsilon"
    ZERO = "zero"


class InadmissibleCreation(ValueError):
    """The created sphere would overlap another particle or leave the slab."""


class ParticleCountMismatch(ValueError):
    pass


class DiscrepancyClass(enum.Enum):
    CLEAN = "clean"
    SHIFT = "shift"
    RECOLLISION = "recollision"
    OVERLAP = "overlap"
    NEAR_BOUNDARY_CREATION = "near_boundary_creation"
    GRAZING = "grazing"


@dataclass(frozen=True)
class CollisionTree:
    """Parents a[j] of particle s+j (0-based) and signs sigma[j] in {+1, -1}."""

    s: int
    a: tuple = ()
    sigma: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(int(p) for p in self.a))
        object.__setattr__(self, "sigma", tuple(int(g) for g in self.sigma))
        if self.s < 1:
            raise ValueError("at least one root particle")
        if len(self.a) != len(self.sigma):
            raise ValueError("a and sigma must have the same length")
        for j, p in enumerate(self.a):
            if not 0 <= p < self.s + j:
                raise ValueError(f"parent {p} of particle {self.s + j} does not exist yet")
        if any(g not in (1, -1) for g in self.sigma):
            raise ValueError("signs must be +1 or -1")

    @property
    def r(self) -> int:
        return len(self.a)

    @property
    def sign(self) -> int:
        return int(np.prod(self.sigma)) if self.sigma else 1

    def label(self) -> str:
        a = ",".join(str(p) for p in self.a)
        g = "".join("+" if x > 0 else "-" for x in self.sigma)
        return f"s{self.s}[{a}]{g}"


@dataclass
class CreationParams:
    """Creation times (strictly decreasing), impact directions and incoming velocities."""

    times: np.ndarray
    nu: np.ndarray
    vbar: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        r = self.times.size
        self.nu = np.asarray(self.nu, dtype=float).reshape(r, 3)
        self.vbar = np.asarray(self.vbar, dtype=float).reshape(r, 3)

    def validate(self, t: float):
        ts = np.concatenate([[t], self.times, [0.0]])
        if np.any(np.diff(ts) >= 0):
            raise ValueError("creation times must satisfy t > t_1 > ... > t_r > 0")


@dataclass
class LogEntry:
    time: float
    kind: str
    ids: tuple = ()
    info: dict = field(default_factory=dict)

    def to_line(self) -> str:
        ids = ",".join(str(i) for i in self.ids) if self.ids else "-"
        return f"{self.time:.17g} {self.kind} {ids} {json.dumps(self.info, sort_keys=True)}"

    @classmethod
    def from_line(cls, line: str) -> "LogEntry":
        t, kind, ids, info = line.split(" ", 3)
        ids = () if ids == "-" else tuple(int(i) for i in ids.split(","))
        return cls(float(t), kind, ids, json.loads(info))


@dataclass
class EventLog:
    mode: Mode
    entries: list = field(default_factory=list)

    def add(self, time, kind, ids=(), **info):
        self.entries.append(LogEntry(float(time), kind, tuple(int(i) for i in ids), info))

    def of_kind(self, kind: str) -> list:
        return [e for e in self.entries if e.kind == kind]

    def to_text(self) -> str:
        return f"# mode {self.mode.value}\n" + "\n".join(e.to_line() for e in self.entries) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EventLog":
        lines = text.strip().splitlines()
        mode = Mode(lines[0].split()[-1])
        return cls(mode, [LogEntry.from_line(l) for l in lines[1:] if l.strip()])


@dataclass
class BackwardResult:
    x: np.ndarray  # positions at time 0, shape (s+r, 3)
    v: np.ndarray  # velocities at time 0
    log: EventLog
    nu: np.ndarray  # directions actually used
    parent_velocity: np.ndarray  # v_{a(k)}(t_k^+) per creation
    records: list
    weight: float


def creation_weight(tree: CollisionTree, params: CreationParams, parent_velocity) -> float:
    """prod_k [sigma_k nu_k . (vbar_k - v_{a(k)}(t_k^+))]_+."""
    pv = np.asarray(parent_velocity, dtype=float).reshape(tree.r, 3)
    w = 1.0
    for j in range(tree.r):
        w *= max(tree.sigma[j] * float(params.nu[j] @ (params.vbar[j] - pv[j])), 0.0)
    return w


def _create_velocities(v_parent, vbar, nu, sigma):
    """Velocities (parent, child) at t_k^- from the post-creation data."""
    if sigma > 0:
        k = float(nu @ (v_parent - vbar))
        return v_parent - k * nu, vbar + k * nu
    return v_parent.copy(), vbar.copy()


def _oriented_nu(nu, vbar, v_parent, sigma, flip: bool):
    nu = np.asarray(nu, dtype=float)
    if flip and sigma * float(nu @ (vbar - v_parent)) < 0:
        return -nu
    return nu


def _min_speed_gap(vel, i) -> float:
    if len(vel) < 2:
        return math.inf
    d = np.delete(vel, i, axis=0) - vel[i]
    return float(np.sqrt((d * d).sum(-1)).min())


def _creation_info(x, vel_minus, parent, child, sigma, present):
    """Geometry and grazing data of a creation, measured at t_k^-."""
    others = [m for m in range(present) if m not in (parent, child)]
    if others:
        d = minimum_image(x[others] - x[parent])
        near = float(np.sqrt((d * d).sum(-1)).min())
    else:
        near = math.inf
    deviated = [child] + ([parent] if sigma > 0 else [])
    ve = [abs(float(vel_minus[j, 0])) for j in deviated]
    rel = math.inf
    for j in deviated:
        for m in range(present):
            if m != j:
                rel = min(rel, abs(float(vel_minus[j, 0] - vel_minus[m, 0])))
    return dict(wall=float(wall_distance(x[parent, 0])), near=_finite(near), ve=ve, rel=_finite(rel))


def _finite(x):
    return x if math.isfinite(x) else 1e300


def build_backward(mode: Mode, t: float, x_s, v_s, tree: CollisionTree, params: CreationParams,
                   records, epsilon: float, flip_nu: bool = False) -> BackwardResult:
    """Backward pseudotrajectory from time t to 0.

    records holds one ReflectionRecord per particle (s + r); they are copied.
    With flip_nu, a direction on the wrong side of the sign constraint is
    replaced by its opposite (used by samplers that draw nu on the sphere).
    """
    params.validate(t)
    x_s = np.asarray(x_s, dtype=float).reshape(tree.s, 3)
    v_s = np.asarray(v_s, dtype=float).reshape(tree.s, 3)
    if len(records) != tree.s + tree.r:
        raise ParticleCountMismatch("one reflection record per particle is needed")
    recs = [r.copy() for r in records]
    if mode is Mode.EPSILON:
        return _build_eps(t, x_s, v_s, tree, params, recs, epsilon, flip_nu)
    return _build_zero(t, x_s, v_s, tree, params, recs, epsilon, flip_nu)


def _root_entry(log, t, v):
    log.add(t, "root", range(len(v)), ve=[abs(float(c)) for c in v[:, 0]])


def _checkpoint(log, time, recs, n):
    log.add(time, "checkpoint", (), pos=[recs[i].position for i in range(n)])


def _build_eps(t, x_s, v_s, tree, params, recs, eps, flip):
    log = EventLog(Mode.EPSILON)
    s, r = tree.s, tree.r
    _root_entry(log, t, v_s)
    # the engine runs in tau = t - time with negated velocities
    state = SystemState(x_s.copy(), -v_s, recs[:s], eps, 0.0)
    nus = np.zeros((r, 3))
    pvs = np.zeros((r, 3))
    weight = 1.0
    stops = list(params.times) + [0.0]

    def on_event(rep):
        st = state_ref[0]
        phys = -st.v
        if rep.kind is EventKind.WALL:
            i = rep.particles[0]
            log.add(t - rep.time, "reflect", (i,), pos=recs[i].position,
                    ve=abs(float(phys[i, 0])), dv=_finite(_min_speed_gap(phys, i)))
        else:
            log.add(t - rep.time, "collide", rep.particles)

    state_ref = [state]
    for k, t_stop in enumerate(stops):
        tau = t - t_stop
        eng = EventEngine(state, t_limit=tau, direction=-1)
        eng.run_until(tau, on_event=on_event)
        n_now = state.N
        _checkpoint(log, t_stop, recs, n_now)
        if k == r:
            break
        parent, child, sigma = tree.a[k], s + k, tree.sigma[k]
        vp = -state.v[parent]
        nu = _oriented_nu(params.nu[k], params.vbar[k], vp, sigma, flip)
        nus[k], pvs[k] = nu, vp
        weight *= max(sigma * float(nu @ (params.vbar[k] - vp)), 0.0)
        xk = state.x[parent] + eps * nu
        if not 0.0 <= xk[0] <= 1.0:
            raise InadmissibleCreation(f"particle {child} created outside the slab")
        xk[1:] = wrap_torus(xk[1:])
        if n_now > 1:
            others = [m for m in range(n_now) if m != parent]
            d = minimum_image(state.x[others] - xk)
            if np.any((d * d).sum(-1) < eps * eps):
                raise InadmissibleCreation(f"particle {child} overlaps an existing sphere")
        va, vk = _create_velocities(vp, params.vbar[k], nu, sigma)
        x_new = np.vstack([state.x, xk])
        v_phys = np.vstack([-state.v, vk])
        v_phys[parent] = va
        info = _creation_info(x_new, v_phys, parent, child, sigma, n_now + 1)
        log.add(t_stop, "create", (child, parent), **info)
        state = SystemState(x_new, -v_phys, recs[:n_now + 1], eps, state.time)
        state_ref[0] = state
    log.add(0.0, "end", ())
    return BackwardResult(state.x.copy(), -state.v, log, nus, pvs, recs, weight)


def _build_zero(t, x_s, v_s, tree, params, recs, eps, flip):
    log = EventLog(Mode.ZERO)
    s, r = tree.s, tree.r
    _root_entry(log, t, v_s)
    n_tot = s + r
    x = np.zeros((n_tot, 3))
    u = np.zeros((n_tot, 3))  # negated physical velocities
    x[:s], u[:s] = x_s, -v_s
    n = s
    tau = 0.0
    nus = np.zeros((r, 3))
    pvs = np.zeros((r, 3))
    weight = 1.0
    flagged = set()
    exempt: dict[tuple, bool] = {}
    stops = list(params.times) + [0.0]

    def wall_times():
        u1 = u[:n, 0]
        x1 = x[:n, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            dt = np.where(u1 > 0, (1.0 - x1) / u1, np.where(u1 < 0, -x1 / u1, np.inf))
        return np.maximum(dt, 0.0)

    def scan_overlaps(dt):
        # first entry within distance eps during a free flight of length dt
        for i in range(n):
            for j in range(i + 1, n):
                if (i, j) in flagged or (i, j) in exempt:
                    continue
                d = minimum_image(x[i] - x[j])
                w = u[i] - u[j]
                if float(d @ d) < eps * eps:
                    hit = 0.0
                else:
                    reach = float(np.linalg.norm(w)) * dt + eps
                    sr, _ = _image_roots(d[None], w[None], eps, np.array([reach]))
                    hit = float(sr[0])
                if hit <= dt:
                    flagged.add((i, j))
                    log.add(t - (tau + hit), "overlap", (i, j))

    def end_exemptions(p):
        for key in [k for k in exempt if p in k]:
            del exempt[key]
            i, j = key
            d = minimum_image(x[i] - x[j])
            if float(d @ d) < eps * eps and key not in flagged:
                flagged.add(key)
                log.add(t - tau, "overlap", key)

    for k, t_stop in enumerate(stops):
        target = t - t_stop
        while True:
            wt = wall_times()
            i = int(np.argmin(wt)) if n else 0
            step = float(wt[i]) if n else math.inf
            if tau + step > target:
                break
            scan_overlaps(step)
            x[:n] += step * u[:n]
            tau += step
            x[i, 0] = 0.0 if u[i, 0] < 0 else 1.0
            gamma = 1 if u[i, 0] < 0 else -1
            v_in, _ = consume_reflection_backward(recs[i], -u[i], gamma)
            u[i] = -v_in
            np.clip(x[:n, 0], 0.0, 1.0, out=x[:n, 0])
            x[:n, 1:] = wrap_torus(x[:n, 1:])
            log.add(t - tau, "reflect", (i,), pos=recs[i].position, ve=abs(float(u[i, 0])),
                    dv=_finite(_min_speed_gap(-u[:n], i)))
            end_exemptions(i)
        dt = target - tau
        scan_overlaps(dt)
        x[:n] += dt * u[:n]
        np.clip(x[:n, 0], 0.0, 1.0, out=x[:n, 0])
        x[:n, 1:] = wrap_torus(x[:n, 1:])
        tau = target
        _checkpoint(log, t_stop, recs, n)
        if k == r:
            break
        parent, child, sigma = tree.a[k], s + k, tree.sigma[k]
        vp = -u[parent]
        nu = _oriented_nu(params.nu[k], params.vbar[k], vp, sigma, flip)
        nus[k], pvs[k] = nu, vp
        weight *= max(sigma * float(nu @ (params.vbar[k] - vp)), 0.0)
        va, vk = _create_velocities(vp, params.vbar[k], nu, sigma)
        x[child] = x[parent]
        u[parent], u[child] = -va, -vk
        n += 1
        info = _creation_info(x[:n], -u[:n], parent, child, sigma, n)
        log.add(t_stop, "create", (child, parent), **info)
        exempt[(parent, child)] = True
    log.add(0.0, "end", ())
    return BackwardResult(x[:n].copy(), -u[:n], log, nus, pvs, recs, weight)


# -- vectorised ZERO mode ----------------------------------------------------

@dataclass
class BatchResult:
    x: np.ndarray  # (n, s+r, 3) positions at time 0
    v: np.ndarray  # (n, s+r, 3) velocities at time 0
    nu: np.ndarray  # (n, r, 3)
    parent_velocity: np.ndarray  # (n, r, 3)
    weight: np.ndarray  # (n,) creation weight products
    reflections: np.ndarray  # (n, s+r) reflections consumed per particle


class RecordDepthExceeded(RuntimeError):
    pass


def _flight_batch(x, u, idx, past, dt):
    """Free flight of non-interacting particles with wall reflections.

    x, u: (n, m, 3) positions and negated velocities; idx: (n, m) next past
    entry; past: (n, M, K, 3) directions; dt: (n,) flight time.
    """
    n, m = x.shape[:2]
    rem = np.broadcast_to(dt[:, None], (n, m)).copy()
    K = past.shape[2]
    while True:
        u1 = u[..., 0]
        x1 = x[..., 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            tw = np.where(u1 > 0, (1.0 - x1) / u1, np.where(u1 < 0, -x1 / u1, np.inf))
        tw = np.maximum(tw, 0.0)
        hit = tw <= rem
        if not hit.any():
            break
        a, b = np.nonzero(hit)
        th = tw[a, b]
        x[a, b] += th[:, None] * u[a, b]
        rem[a, b] -= th
        low = u[a, b, 0] < 0
        x[a, b, 0] = np.where(low, 0.0, 1.0)
        gamma = np.where(low, 1.0, -1.0)
        j = idx[a, b]
        if np.any(j >= K):
            raise RecordDepthExceeded("more reflections than preset record entries")
        w = past[a, b, j] * gamma[:, None]
        speed = np.sqrt((u[a, b] ** 2).sum(-1))
        vin = w * (speed / np.sqrt((w * w).sum(-1)))[:, None]
        vin = vin * (speed / np.sqrt((vin * vin).sum(-1)))[:, None]
        u[a, b] = -vin
        idx[a, b] += 1
    x += rem[..., None] * u
    np.clip(x[..., 0], 0.0, 1.0, out=x[..., 0])
    x[..., 1:] = wrap_torus(x[..., 1:])


def build_backward_zero_batch(t: float, x_s, v_s, tree: CollisionTree, times, nu, vbar, past,
                              flip_nu: bool = True) -> BatchResult:
    """ZERO mode for n independent samples at once.

    x_s, v_s: (n, s, 3); times: (n, r) decreasing; nu, vbar: (n, r, 3);
    past: (n, s+r, K, 3) past reflection directions (entry j is the j-th
    consumed by backward reflections).  Matches build_backward in ZERO mode
    with records preset from `past`.
    """
    x_s = np.asarray(x_s, dtype=float)
    n, s = x_s.shape[:2]
    r = tree.r
    m = s + r
    x = np.zeros((n, m, 3))
    u = np.zeros((n, m, 3))
    x[:, :s] = x_s
    u[:, :s] = -np.asarray(v_s, dtype=float)
    idx = np.zeros((n, m), dtype=np.int64)
    nus = np.zeros((n, r, 3))
    pvs = np.zeros((n, r, 3))
    weight = np.ones(n)
    times = np.asarray(times, dtype=float).reshape(n, r)
    prev = np.full(n, float(t))
    for k in range(r + 1):
        t_stop = times[:, k] if k < r else np.zeros(n)
        cur = s + k
        _flight_batch(x[:, :cur], u[:, :cur], idx[:, :cur], past[:, :cur], prev - t_stop)
        prev = t_stop
        if k == r:
            break
        p, g = tree.a[k], tree.sigma[k]
        vp = -u[:, p]
        nk = np.asarray(nu[:, k], dtype=float)
        vb = np.asarray(vbar[:, k], dtype=float)
        proj = (nk * (vb - vp)).sum(-1)
        if flip_nu:
            nk = np.where((g * proj < 0)[:, None], -nk, nk)
            proj = (nk * (vb - vp)).sum(-1)
        nus[:, k], pvs[:, k] = nk, vp
        weight *= np.maximum(g * proj, 0.0)
        if g > 0:
            c = (nk * (vp - vb)).sum(-1, keepdims=True)
            va, vk = vp - c * nk, vb + c * nk
        else:
            va, vk = vp, vb
        x[:, cur] = x[:, p]
        u[:, p], u[:, cur] = -va, -vk
    return BatchResult(x, -u, nus, pvs, weight, idx)


# -- discrepancy classification ------------------------------------------------

_PRIORITY = {
    DiscrepancyClass.SHIFT: 0,
    DiscrepancyClass.NEAR_BOUNDARY_CREATION: 1,
    DiscrepancyClass.GRAZING: 2,
    DiscrepancyClass.RECOLLISION: 3,
    DiscrepancyClass.OVERLAP: 4,
}


def classify_discrepancy(eps_log: EventLog, zero_log: EventLog, epsilon: float) -> DiscrepancyClass:
    """Class of the first difference between the two logs, backward in time.

    Candidates and their times: a shift at the first checkpoint (creation
    time or time 0) where the record positions differ; the first hard-sphere
    collision; the first point-particle overlap; a creation whose parent is
    within 2 epsilon of a wall or of another particle; a grazing flag
    (threshold epsilon^(1/4)) at the root, at a creation or at a reflection,
    or a creation whose parent is within epsilon^(1/3) of both a wall and
    another particle.  The latest time wins; ties go to shift, then near
    boundary, then grazing.
    """
    cands = []
    ce = eps_log.of_kind("checkpoint")
    cz = zero_log.of_kind("checkpoint")
    for a, b in zip(ce, cz):
        if a.info["pos"] != b.info["pos"]:
            cands.append((a.time, DiscrepancyClass.SHIFT))
            break
    if len(ce) != len(cz):
        cands.append((min(ce[-1].time if ce else 0.0, cz[-1].time if cz else 0.0), DiscrepancyClass.SHIFT))
    col = eps_log.of_kind("collide")
    if col:
        cands.append((col[0].time, DiscrepancyClass.RECOLLISION))
    ov = zero_log.of_kind("overlap")
    if ov:
        cands.append((ov[0].time, DiscrepancyClass.OVERLAP))

    graze = epsilon ** 0.25
    cut = epsilon ** (1.0 / 3.0)
    for e in eps_log.of_kind("create"):
        if e.info["wall"] < 2 * epsilon or e.info["near"] < 2 * epsilon:
            cands.append((e.time, DiscrepancyClass.NEAR_BOUNDARY_CREATION))
            break
    for log in (eps_log, zero_log):
        for e in log.entries:
            flag = False
            if e.kind == "root":
                flag = min(e.info["ve"], default=math.inf) < graze
            elif e.kind == "create":
                flag = (min(e.info["ve"]) < graze or e.info["rel"] < graze
                        or (e.info["wall"] < cut and e.info["near"] < cut))
            elif e.kind == "reflect":
                flag = e.info["ve"] < graze or e.info["dv"] < graze
            if flag:
                cands.append((e.time, DiscrepancyClass.GRAZING))
                break
    if not cands:
        return DiscrepancyClass.CLEAN
    cands.sort(key=lambda c: (-c[0], _PRIORITY[c[1]]))
    return cands[0][1]


def final_distance(eps_config, zero_config) -> float:
    """Largest slab-torus distance between homologous particles."""
    a = eps_config.x if isinstance(eps_config, BackwardResult) else np.asarray(eps_config, float)
    b = zero_config.x if isinstance(zero_config, BackwardResult) else np.asarray(zero_config, float)
    a = a.reshape(-1, 3)
    b = b.reshape(-1, 3)
    if a.shape != b.shape:
        raise ParticleCountMismatch(f"{len(a)} vs {len(b)} particles")
    d = minimum_image(a - b)
    return float(np.sqrt((d * d).sum(-1)).max()) if len(a) else 0.0
