"""Event-driven hard spheres of diameter epsilon in the slab.

Free flight, elastic pair collisions and diffuse wall reflections.  The
queue keeps at most one wall entry and one pair entry per owning particle
and invalidates entries lazily through per-particle stamps.  Every particle
is advanced to the current event time, so positions always refer to
`state.time`.
"""
from __future__ import annotations

import collections
import enum
import heapq
import math
from dataclasses import dataclass

import numpy as np

from .geometry import minimum_image, wrap_torus
from .randomness import (ReflectionRecord, consume_reflection, consume_reflection_backward,
                         make_rng, sample_initial_configuration)

GRAZING_TOL = 1e-10
TIE_TOL = 1e-14


class StuckDetected(RuntimeError):
    """Too many events in too short a time (accumulating shocks)."""


class ReflectionBoundViolation(AssertionError):
    """Two reflections of a collision-free particle closer than 1/|v| in time."""


@dataclass
class SystemState:
    x: np.ndarray
    v: np.ndarray
    records: list
    epsilon: float
    time: float = 0.0

    def __post_init__(self):
        self.x = np.array(self.x, dtype=float).reshape(-1, 3)
        self.v = np.array(self.v, dtype=float).reshape(-1, 3)

    @property
    def N(self) -> int:
        return len(self.x)

    def copy(self) -> "SystemState":
        return SystemState(self.x.copy(), self.v.copy(), [r.copy() for r in self.records],
                           self.epsilon, self.time)

    def kinetic_energy(self) -> float:
        return 0.5 * float(np.sum(self.v * self.v))

    def min_pair_distance(self) -> float:
        if self.N < 2:
            return math.inf
        d = minimum_image(self.x[:, None, :] - self.x[None, :, :])
        r2 = np.einsum("ijk,ijk->ij", d, d)
        iu = np.triu_indices(self.N, 1)
        return float(np.sqrt(r2[iu].min()))


class EventKind(enum.Enum):
    PAIR = "collision"
    WALL = "reflection"


@dataclass(frozen=True)
class Event:
    time: float
    kind: EventKind
    i: int
    j: int
    stamp: tuple


@dataclass
class EventReport:
    time: float
    kind: EventKind
    particles: tuple
    gamma: int = 0


def apply_collision(v_i, v_j, nu):
    """Elastic exchange of the normal components along the unit vector nu."""
    v_i = np.asarray(v_i, dtype=float)
    v_j = np.asarray(v_j, dtype=float)
    nu = np.asarray(nu, dtype=float)
    k = np.sum(nu * (v_i - v_j), axis=-1, keepdims=True)
    return v_i - k * nu, v_j + k * nu


def _roots(d, w, eps):
    """Earliest s >= 0 with |d + s w| = eps on approach, inf otherwise.

    Returns (s, grazing) where grazing marks contacts whose normal relative
    speed is below GRAZING_TOL; those are skipped.
    """
    a = (w * w).sum(axis=-1)
    b = (d * w).sum(axis=-1)
    c = (d * d).sum(axis=-1) - eps * eps
    disc = b * b - a * c
    hit = (b < 0.0) & (disc > 0.0)
    sq = np.sqrt(np.where(hit, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(hit, np.maximum(c, 0.0) / (sq - b), np.inf)
    grazing = hit & (sq < GRAZING_TOL * eps)
    if grazing.any():
        s = np.where(grazing, np.inf, s)
    return s, grazing


_RINGS: dict[int, np.ndarray] = {}


def _ring(L: int) -> np.ndarray:
    """Torus offsets (0, k2, k3) with max(|k2|, |k3|) == L."""
    off = _RINGS.get(L)
    if off is None:
        k = np.arange(-L, L + 1)
        k2, k3 = np.meshgrid(k, k, indexing="ij")
        ring = np.maximum(np.abs(k2), np.abs(k3)).ravel() == L
        off = np.stack([np.zeros(ring.sum()), k2.ravel()[ring], k3.ravel()[ring]], axis=-1)
        _RINGS[L] = off
    return off


def _image_roots(d, w, eps, reach):
    """Roots over all torus images that can be met within distance `reach`.

    An image in ring L sits at torus distance at least L - 1/2 from the
    minimum image, so only rings with L <= reach + 1/2 are scanned.
    """
    s, grazing = _roots(d, w, eps)
    level = np.floor(reach + 0.5).astype(np.int64)
    idx = np.flatnonzero(level >= 1)
    L = 1
    while idx.size:
        dd = d[idx, None, :] + _ring(L)[None, :, :]
        ss, gg = _roots(dd, w[idx, None, :], eps)
        s[idx] = np.minimum(s[idx], ss.min(axis=1))
        grazing[idx] |= gg.any(axis=1)
        L += 1
        idx = idx[level[idx] >= L]
    return s, grazing


def predict_pair_collision(z_i, z_j, epsilon: float, horizon: float):
    """Time in (0, horizon] of the next contact of two free particles, or None."""
    (xi, vi), (xj, vj) = z_i, z_j
    d = minimum_image(np.asarray(xi, float) - np.asarray(xj, float))
    w = np.asarray(vi, float) - np.asarray(vj, float)
    reach = float(np.linalg.norm(w)) * horizon + epsilon
    s, _ = _image_roots(d[None, :], w[None, :], epsilon, np.array([reach]))
    s = float(s[0])
    if 0.0 < s <= horizon or (s == 0.0 and horizon > 0):
        return s if s > 0 else 0.0
    return None


class EventEngine:
    """Owns the event queue of one SystemState.

    direction=+1 runs the physical flow with future reflection entries;
    direction=-1 runs the time-reversed flow: velocities held by the engine
    are the negated physical ones and walls consume past entries.
    """

    def __init__(self, state: SystemState, t_limit: float = math.inf, direction: int = 1,
                 max_events_per_unit_time: float | None = None, stuck_window: int = 2000,
                 lookahead: float = 0.25, check_reflection_bound: bool = True):
        self.state = state
        self.direction = direction
        self.lookahead = lookahead
        self.t_limit = min(t_limit, state.time + lookahead) if math.isinf(t_limit) else t_limit
        self._auto_limit = math.isinf(t_limit)
        n = state.N
        self.stamp = np.zeros(n, dtype=np.int64)
        self.wall_time = np.full(n, math.inf)
        self.last_reflection = np.full(n, -math.inf)
        self.last_collision = np.full(n, -math.inf)
        self.heap: list = []
        self._seq = 0
        rate = max_events_per_unit_time or 1e6 * max(n, 1)
        self._window = stuck_window
        self._min_span = stuck_window / rate
        self._recent = collections.deque(maxlen=stuck_window)
        self.check_reflection_bound = check_reflection_bound
        self.stats = collections.Counter()
        self.max_reflection_speed_change = 0.0
        self.max_collision_energy_change = 0.0
        self.rebuild()

    # queue maintenance -------------------------------------------------
    def _push(self, t, kind, i, j, owner):
        st = self.stamp
        key = min(i, j) if j >= 0 else i
        self._seq += 1
        heapq.heappush(self.heap, (t, key, self._seq, kind, i, j, int(st[i]),
                                   int(st[j]) if j >= 0 else -1, owner))

    def _predict_wall(self, i):
        x1 = self.state.x[i, 0]
        v1 = self.state.v[i, 0]
        if v1 == 0.0 or abs(v1) < GRAZING_TOL:
            if v1 != 0.0:
                self.stats["grazing_wall_skipped"] += 1
            self.wall_time[i] = math.inf
            return
        t = self.state.time + max(((1.0 - x1) if v1 > 0 else -x1) / v1, 0.0)
        self.wall_time[i] = t
        if t <= self.t_limit:
            self._push(t, EventKind.WALL, i, -1, i)

    def _predict_pairs(self, i):
        st = self.state
        n = st.N
        if n < 2:
            return
        now = st.time
        others = np.concatenate([np.arange(i), np.arange(i + 1, n)])
        d = minimum_image(st.x[i] - st.x[others])
        w = st.v[i] - st.v[others]
        h = np.minimum(np.minimum(self.wall_time[others], self.wall_time[i]), self.t_limit) - now
        live = h > 0
        if not live.any():
            return
        reach = np.sqrt(np.einsum("ij,ij->i", w, w)) * np.where(live, h, 0.0) + st.epsilon
        s, grazing = _image_roots(d, w, st.epsilon, reach)
        s = np.where(live & (s <= h), s, np.inf)
        ng = int(np.count_nonzero(grazing & live))
        if ng:
            self.stats["grazing_pair_skipped"] += ng
        k = int(np.argmin(s))
        if math.isfinite(s[k]):
            self._push(now + float(s[k]), EventKind.PAIR, i, int(others[k]), i)

    def rebuild(self):
        """Recompute every prediction from the current state."""
        st = self.state
        self.heap = []
        self.stamp += 1
        for i in range(st.N):
            self._predict_wall(i)
        if st.N >= 2:
            self._predict_all_pairs()

    def _predict_all_pairs(self):
        st = self.state
        n = st.N
        now = st.time
        iu, ju = np.triu_indices(n, 1)
        d = minimum_image(st.x[iu] - st.x[ju])
        w = st.v[iu] - st.v[ju]
        h = np.minimum(np.minimum(self.wall_time[iu], self.wall_time[ju]), self.t_limit) - now
        live = h > 0
        reach = np.sqrt(np.einsum("ij,ij->i", w, w)) * np.where(live, h, 0.0) + st.epsilon
        s, grazing = _image_roots(d, w, st.epsilon, reach)
        s = np.where(live & (s <= h), s, np.inf)
        self.stats["grazing_pair_skipped"] += int(np.count_nonzero(grazing & live))
        # earliest partner per owner, each pair visible from both ends
        best = np.full(n, np.inf)
        partner = np.full(n, -1)
        for a, b in ((iu, ju), (ju, iu)):
            order = np.lexsort((b, s, a))
            first = np.ones(order.size, dtype=bool)
            first[1:] = a[order][1:] != a[order][:-1]
            sel = order[first]
            upd = s[sel] < best[a[sel]]
            best[a[sel][upd]] = s[sel][upd]
            partner[a[sel][upd]] = b[sel][upd]
        for i in np.flatnonzero(np.isfinite(best)):
            self._push(now + float(best[i]), EventKind.PAIR, int(i), int(partner[i]), int(i))

    def _valid(self, e) -> bool:
        _, _, _, kind, i, j, si, sj, _ = e
        if si != self.stamp[i]:
            return False
        return kind is EventKind.WALL or sj == self.stamp[j]

    def _pop_valid(self):
        """Earliest valid entry, ties within TIE_TOL broken by particle index."""
        heap = self.heap
        while heap:
            e = heapq.heappop(heap)
            if self._valid(e):
                break
            self._salvage(e)
        else:
            return None
        held = []
        while heap and heap[0][0] <= e[0] + TIE_TOL:
            f = heapq.heappop(heap)
            if not self._valid(f):
                self._salvage(f)
                continue
            if f[1] < e[1]:
                held.append(e)
                e = f
            else:
                held.append(f)
        for f in held:
            heapq.heappush(heap, f)
        return e

    def _salvage(self, e):
        _, _, _, kind, i, j, si, sj, owner = e
        # owner still current but its partner moved on: look again
        if kind is EventKind.PAIR and si == self.stamp[owner]:
            self._predict_pairs(owner)

    # dynamics -----------------------------------------------------------
    def advance_to(self, t: float):
        st = self.state
        dt = t - st.time
        if dt < 0:
            raise ValueError("cannot advance backwards")
        if dt > 0:
            st.x += dt * st.v
            np.clip(st.x[:, 0], 0.0, 1.0, out=st.x[:, 0])
            st.x[:, 1:] = wrap_torus(st.x[:, 1:])
            st.time = t

    def _register(self, t):
        self._recent.append(t)
        if len(self._recent) == self._window and self._recent[-1] - self._recent[0] < self._min_span:
            raise StuckDetected(f"{self._window} events within {self._recent[-1] - self._recent[0]:.3e}")

    def _reflect(self, i) -> EventReport:
        st = self.state
        v = st.v[i]
        # the engine only schedules a wall event while moving towards that wall
        if v[0] < 0.0:
            st.x[i, 0] = 0.0
            gamma = 1
        else:
            st.x[i, 0] = 1.0
            gamma = -1
        speed = math.sqrt(float(v @ v))
        if self.check_reflection_bound and self.last_reflection[i] > self.last_collision[i]:
            gap = st.time - self.last_reflection[i]
            if gap * speed < 1.0 - 1e-9:
                raise ReflectionBoundViolation(
                    f"particle {i}: reflections {gap:.6g} apart at speed {speed:.6g}")
        if self.direction > 0:
            v_new, _ = consume_reflection(st.records[i], v, gamma)
        else:
            v_phys, _ = consume_reflection_backward(st.records[i], -v, gamma)
            v_new = -v_phys
        self.max_reflection_speed_change = max(
            self.max_reflection_speed_change, abs(math.sqrt(float(v_new @ v_new)) - speed) / speed)
        st.v[i] = v_new
        self.last_reflection[i] = st.time
        self.stats["reflections"] += 1
        return EventReport(st.time, EventKind.WALL, (i,), gamma)

    def _collide(self, i, j) -> EventReport:
        st = self.state
        d = minimum_image(st.x[i] - st.x[j])
        nu = d / math.sqrt(float(d @ d))
        e0 = float(st.v[i] @ st.v[i] + st.v[j] @ st.v[j])
        st.v[i], st.v[j] = apply_collision(st.v[i], st.v[j], nu)
        e1 = float(st.v[i] @ st.v[i] + st.v[j] @ st.v[j])
        if e0 > 0:
            self.max_collision_energy_change = max(self.max_collision_energy_change, abs(e1 - e0) / e0)
        self.last_collision[i] = self.last_collision[j] = st.time
        self.stats["collisions"] += 1
        return EventReport(st.time, EventKind.PAIR, (i, j))

    def peek_time(self) -> float:
        """Time of the next event (without consuming it), inf if none before t_limit."""
        e = self._pop_valid()
        if e is None:
            return math.inf
        heapq.heappush(self.heap, e)
        return e[0]

    def step(self, t_stop: float = math.inf) -> EventReport | None:
        """Process the next event if it happens no later than t_stop."""
        while True:
            e = self._pop_valid()
            if e is None or e[0] > self.t_limit:
                if e is not None:
                    heapq.heappush(self.heap, e)
                if self._auto_limit and self.t_limit < t_stop:
                    self.advance_to(max(self.state.time, self.t_limit))
                    self.t_limit = self.state.time + self.lookahead
                    self.rebuild()
                    continue
                return None
            if e[0] > t_stop:
                heapq.heappush(self.heap, e)
                return None
            break
        t, _, _, kind, i, j, _, _, _ = e
        self.advance_to(max(t, self.state.time))
        self._register(t)
        if kind is EventKind.WALL:
            rep = self._reflect(i)
            touched = (i,)
        else:
            rep = self._collide(i, j)
            touched = (i, j)
        for k in touched:
            self.stamp[k] += 1
        for k in touched:
            self._predict_wall(k)
        for k in touched:
            self._predict_pairs(k)
        return rep

    def run_until(self, t_end: float, on_event=None, max_events: int | None = None) -> int:
        count = 0
        if t_end > self.t_limit and not self._auto_limit:
            self.t_limit = t_end
            self.rebuild()
        while max_events is None or count < max_events:
            rep = self.step(t_end)
            if rep is None:
                break
            count += 1
            if on_event is not None:
                on_event(rep)
        if max_events is None or count < max_events:
            self.advance_to(max(t_end, self.state.time))
        return count


def step_to_next_event(state: SystemState, engine: EventEngine | None = None):
    """Advance to the next event and apply it.

    The engine is cached on the state, so repeated calls continue the same
    queue.  Returns (state, report); report is None if nothing ever happens.
    """
    if engine is None:
        engine = getattr(state, "_engine", None)
        if engine is None or engine.state is not state:
            engine = EventEngine(state)
            state._engine = engine
    rep = engine.step(math.inf) if engine._auto_limit else engine.step(engine.t_limit)
    return state, rep


def simulate(state: SystemState, t_end: float, observer=None, sample_times=None,
             on_event=None, **engine_opts) -> SystemState:
    """Run the flow up to t_end in place.

    observer(time, state) is called at each of `sample_times` (default: only
    t_end).  on_event(report) sees every processed event.
    """
    if t_end < state.time:
        raise ValueError("t_end precedes the current time")
    times = sorted(set([t_end] if sample_times is None else list(sample_times)))
    if times and (times[0] < state.time or times[-1] > t_end):
        raise ValueError("sample times must lie in [state.time, t_end]")
    if t_end == state.time:
        if observer is not None:
            for t in times:
                observer(t, state)
        return state
    engine = EventEngine(state, t_limit=t_end, **engine_opts)
    for t in times:
        engine.run_until(t, on_event=on_event)
        if observer is not None:
            observer(t, state)
    engine.run_until(t_end, on_event=on_event)
    state._engine = engine
    return state


def second_shock_times(N: int, epsilon: float, beta: float, horizon: float, replicas: int,
                       seed: int = 0, f0=None) -> np.ndarray:
    """Time of the second shock (pair collision or wall reflection) per replica, inf if none by horizon."""
    from .densities import ProfileMaxwellian

    if not horizon < epsilon / 2:
        raise ValueError("horizon must be smaller than epsilon/2")
    f0 = f0 or ProfileMaxwellian(beta=beta)
    out = np.full(replicas, math.inf)
    for rep in range(replicas):
        rng = make_rng(seed, 0x5C0C, rep)
        st = sample_initial_configuration(rng, N, epsilon, f0, seed=seed, replica=rep)
        eng = EventEngine(st, t_limit=horizon)
        seen = []
        eng.run_until(horizon, on_event=lambda r: seen.append(r.time), max_events=2)
        if len(seen) >= 2:
            out[rep] = seen[1]
    return out


def double_shock_fraction(N: int, epsilon: float, beta: float, delta: float, replicas: int,
                          seed: int = 0, f0=None):
    """Monte Carlo probability of at least two shocks during [0, delta].

    Shocks are pair collisions or wall reflections.  Returns (fraction,
    stderr).
    """
    if not delta < epsilon / 2:
        raise ValueError("delta must be smaller than epsilon/2")
    t2 = second_shock_times(N, epsilon, beta, delta, replicas, seed, f0)
    p = float(np.mean(t2 <= delta))
    return p, math.sqrt(max(p * (1 - p), 0.0) / replicas)
