"""Dispatching and replication policies.

A :class:`PolicyInstance` is an immutable description: the server partition,
the replica count of every subsystem and the routing rule.  The engine calls
``instance.runtime(sim)`` once per run to get the mutable per-run state
(idle-server heaps and dispatcher queues), which receives ``on_arrival`` and
``on_idle`` callbacks.
"""

from __future__ import annotations

import heapq
import logging
import math
from bisect import bisect_right
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .model import SystemParams, batch_sizes, is_stabilizable

log = logging.getLogger(__name__)

POLICY_NAMES = ("baseline", "frec", "dq", "sb_frec", "sb_dq")


@dataclass(frozen=True)
class Subsystem:
    """Servers ``[lo, hi)``; the last ``small`` of them form the small pool (DQ variants)."""

    label: int
    lo: int
    hi: int
    replicas: int
    small: int = 0

    @property
    def size(self) -> int:
        return self.hi - self.lo

    @property
    def large_hi(self) -> int:
        return self.hi - self.small

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "first_server": self.lo,
            "size": self.size,
            "replicas": self.replicas,
            "small_pool": self.small,
        }


@dataclass(frozen=True)
class RoutingKernel:
    """Size-dependent routing: nearest grid row, then a draw over the row's subsystems."""

    xs: np.ndarray
    cum: np.ndarray  # (m, s) cumulative probabilities over subsystems
    probs: np.ndarray  # (m, s)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.xs[1:] + self.xs[:-1])

    def row_of(self, x: float) -> int:
        return int(np.searchsorted(self.midpoints, x, side="right"))


@dataclass(frozen=True)
class PolicyInstance:
    name: str
    params: SystemParams
    subsystems: tuple[Subsystem, ...] = ()
    route_probability: float = 1.0
    kernel: RoutingKernel | None = None
    literal: bool = False
    notes: tuple[str, ...] = field(default=())

    @property
    def used_servers(self) -> int:
        return sum(s.size for s in self.subsystems) if self.subsystems else self.params.n

    def owner_map(self) -> list[int]:
        owner = [-1] * self.params.n
        for idx, sub in enumerate(self.subsystems):
            for srv in range(sub.lo, sub.hi):
                owner[srv] = idx
        return owner

    def describe(self) -> dict:
        return {
            "policy": self.name,
            "used_servers": self.used_servers,
            "route_probability": self.route_probability if self.kernel is None else None,
            "subsystems": [s.to_dict() for s in self.subsystems],
            "notes": list(self.notes),
        }

    def runtime(self, sim):
        if self.name == "baseline":
            return _BaselineRuntime(self, sim)
        if self.name in ("frec", "sb_frec"):
            return _LiteralFrecRuntime(self, sim) if self.literal else _BatchRuntime(self, sim)
        if self.name == "dq":
            return _DqRuntime(self, sim)
        if self.name == "sb_dq":
            return _SbDqRuntime(self, sim)
        raise ConfigurationError(f"unknown policy {self.name!r}")


# --------------------------------------------------------------------------
# Partition arithmetic
# --------------------------------------------------------------------------


def _two_subsystem_sizes(params: SystemParams) -> tuple[int, int, int, int, float]:
    if not is_stabilizable(params):
        raise ConfigurationError(
            f"lambda={params.lam} is not below 1/(1+1/mu)={1 / (1 + 1 / params.mu):.6g}; no stable policy"
        )
    n, k, lam, mu, a = params.n, params.k, params.lam, params.mu, params.alpha
    r1, r2 = batch_sizes(params)
    q = params.routing_probability()
    base = lam * n / k
    spare = lam * n**a / k
    n1 = math.floor(base * q * (r1 + k / mu) + spare)
    n2 = math.ceil(base * (1.0 - q) * (r2 + k / mu) + spare)
    n1 = min(n1, n)
    n2 = min(n2, n - n1)  # the exact sizes add to n; ceil can overshoot by one
    return n1, n2, r1, r2, q


def frec_partition(params: SystemParams) -> tuple[Subsystem, Subsystem, float]:
    n1, n2, r1, r2, q = _two_subsystem_sizes(params)
    n1 -= n1 % r1
    n2 -= n2 % r2
    if r2 < params.k:
        raise ConfigurationError(
            f"ceil(r* k) - 1 = {r2} < k = {params.k}: the second subsystem cannot run k replicas"
        )
    if q > 0 and n1 < r1:
        raise ConfigurationError(
            f"n too small for FREC at these parameters: subsystem 1 has {n1} servers, needs {r1}"
        )
    if n2 < r2:
        raise ConfigurationError(
            f"n too small for FREC at these parameters: subsystem 2 has {n2} servers, needs {r2}"
        )
    return Subsystem(1, 0, n1, r1), Subsystem(2, n1, n1 + n2, r2), q


def dq_small_pool(params: SystemParams) -> int:
    return max(params.k, math.floor(params.lam * params.n**params.alpha / (2 * params.k)))


def dq_partition(params: SystemParams) -> tuple[Subsystem, Subsystem, float]:
    n1, n2, r1, r2, q = _two_subsystem_sizes(params)
    if r2 < params.k:
        raise ConfigurationError(
            f"ceil(r* k) - 1 = {r2} < k = {params.k}: the second subsystem cannot run k replicas"
        )
    small = dq_small_pool(params)
    for label, size in ((1, n1), (2, n2)):
        if (label == 2 or q > 0) and size <= small:
            raise ConfigurationError(
                f"n too small for DQ: subsystem {label} has {size} servers, small pool needs {small}"
            )
    return Subsystem(1, 0, n1, r1, min(small, n1)), Subsystem(2, n1, n1 + n2, r2, min(small, n2)), q


def sb_subsystem_loads(params: SystemParams, profile, model) -> dict[int, float]:
    """Servers needed by each replica count ``r``: ``(lambda n / k) sum_j w_j x_j p_jr C(x_j, r)``."""
    k = params.k
    r_hi = profile.support_max
    loads: dict[int, float] = {}
    for r in range(k, r_hi + 1):
        col = profile.column(r)
        acc = 0.0
        for x, w, p in zip(profile.xs, profile.weights, col):
            if p <= 0.0:
                continue
            e = [model.order_stat_mean(i, r, float(x)) for i in range(1, k + 1)]
            acc += w * x * p * (r + (r - k) * e[-1] + math.fsum(e))
        loads[r] = params.job_rate * acc
    return loads


def sb_partition(
    params: SystemParams, profile, model, dummy_queues: bool
) -> tuple[tuple[Subsystem, ...], np.ndarray, list[str]]:
    """Subsystems for every ``r`` in ``[k, r_bar]`` and a routing table possibly adjusted by folding.

    A subsystem that would receive traffic but has fewer servers than ``r``
    (or none beyond its small pool) gets its routing mass moved to the
    nearest usable replica count.
    """
    if profile.k != params.k:
        raise ConfigurationError(f"profile was solved for k={profile.k}, system has k={params.k}")
    k = params.k
    r_bar = profile.support_max
    loads = sb_subsystem_loads(params, profile, model)
    spare = params.n**params.alpha / r_bar
    small_size = max(1, math.floor(params.n**params.alpha / (2 * r_bar)))
    subs: list[Subsystem] = []
    start = 0
    for r in range(k, r_bar + 1):
        # a replica count that no grid point uses gets no servers (and no spare)
        size = math.floor(loads[r] + spare) if profile.column(r).any() else 0
        size -= size % r
        size = max(0, min(size, params.n - start))
        size -= size % r
        small = min(max(r, small_size), size) if dummy_queues else 0
        subs.append(Subsystem(r, start, start + size, r, small))
        start += size

    def usable(sub: Subsystem) -> bool:
        if sub.size < sub.replicas:
            return False
        return not dummy_queues or sub.size > sub.small

    rs = list(range(k, r_bar + 1))
    probs = np.array([[row.get(r, 0.0) for r in rs] for row in profile.rows()], dtype=float)
    notes: list[str] = []
    ok = [usable(s) for s in subs]
    if not any(ok):
        raise ConfigurationError(f"n={params.n} is too small for any size-based subsystem")
    for idx, sub in enumerate(subs):
        if ok[idx] or not probs[:, idx].any():
            continue
        target = min((j for j in range(len(subs)) if ok[j]), key=lambda j: (abs(j - idx), j))
        probs[:, target] += probs[:, idx]
        probs[:, idx] = 0.0
        msg = f"subsystem r={sub.replicas} has {sub.size} servers; its traffic is folded into r={subs[target].replicas}"
        log.warning(msg)
        notes.append(msg)
    return tuple(subs), probs, notes


# --------------------------------------------------------------------------
# Builders
# --------------------------------------------------------------------------


def build_baseline(params: SystemParams) -> PolicyInstance:
    """k replicas on k distinct uniformly chosen servers, no extra redundancy."""
    return PolicyInstance("baseline", params)


def build_frec(params: SystemParams, literal: bool = False) -> PolicyInstance:
    """Full replication with early cancellation.

    ``literal=True`` queues a replica at every server of the subsystem and
    cancels the rest once ``R`` have started; the default seizes the first
    ``R`` simultaneously idle servers.  For ``k = 1`` servers are always
    released in blocks of ``R``, so both give the same job metrics; for
    ``k > 1`` early finishers free servers one at a time and the two differ.
    """
    s1, s2, q = frec_partition(params)
    return PolicyInstance("frec", params, (s1, s2), route_probability=q, literal=literal)


def build_dq(params: SystemParams) -> PolicyInstance:
    s1, s2, q = dq_partition(params)
    return PolicyInstance("dq", params, (s1, s2), route_probability=q)


def _build_sb(name: str, params: SystemParams, profile, model, literal: bool = False) -> PolicyInstance:
    subs, probs, notes = sb_partition(params, profile, model, dummy_queues=name == "sb_dq")
    cum = np.cumsum(probs, axis=1)
    cum[:, -1] = 1.0
    kernel = RoutingKernel(np.asarray(profile.xs, dtype=float), cum, probs)
    return PolicyInstance(name, params, subs, kernel=kernel, literal=literal, notes=tuple(notes))


def build_sb_frec(params: SystemParams, profile, model, literal: bool = False) -> PolicyInstance:
    return _build_sb("sb_frec", params, profile, model, literal)


def build_sb_dq(params: SystemParams, profile, model) -> PolicyInstance:
    return _build_sb("sb_dq", params, profile, model)


def build_policy(name: str, params: SystemParams, profile=None, model=None, literal: bool = False) -> PolicyInstance:
    if name == "baseline":
        return build_baseline(params)
    if name == "frec":
        return build_frec(params, literal)
    if name == "dq":
        return build_dq(params)
    if name in ("sb_frec", "sb_dq"):
        if profile is None or model is None:
            raise ConfigurationError(f"policy {name} needs a replication profile and a slowdown model")
        return build_sb_frec(params, profile, model, literal) if name == "sb_frec" else build_sb_dq(params, profile, model)
    raise ConfigurationError(f"unknown policy {name!r}; choose from {', '.join(POLICY_NAMES)}")


# --------------------------------------------------------------------------
# Runtimes
# --------------------------------------------------------------------------


def distinct_servers(stream, lo: int, size: int, count: int) -> list[int]:
    """``count`` distinct servers drawn uniformly from ``[lo, lo + size)``."""
    if count == 1:
        return [lo + int(stream.random() * size)]
    if 4 * count > size:
        picks = stream.generator.choice(size, count, replace=False)
        return [lo + int(p) for p in picks]
    chosen: list[int] = []
    seen: set[int] = set()
    while len(chosen) < count:
        s = int(stream.random() * size)
        if s not in seen:
            seen.add(s)
            chosen.append(lo + s)
    return chosen


class _Router:
    def __init__(self, policy: PolicyInstance, sim) -> None:
        self.stream = sim.routing_stream
        self.q = policy.route_probability
        self.kernel = policy.kernel
        if self.kernel is not None:
            self.mid = self.kernel.midpoints.tolist()
            self.cum = [row.tolist() for row in self.kernel.cum]

    def __call__(self, job) -> int:
        u = self.stream.random()
        if self.kernel is None:
            return 0 if u < self.q else 1
        row = self.cum[bisect_right(self.mid, job.size)]
        return min(bisect_right(row, u), len(row) - 1)


class _BaselineRuntime:
    def __init__(self, policy: PolicyInstance, sim) -> None:
        self.sim = sim
        self.n = sim.n
        self.stream = sim.server_stream

    def on_arrival(self, job) -> None:
        job.lo, job.hi = 0, self.n
        for srv in distinct_servers(self.stream, 0, self.n, job.k):
            self.sim.assign(job, srv)

    def on_idle(self, servers) -> None:
        pass


class _BatchRuntime:
    """FREC semantics: a job starts all its replicas together on idle servers of its subsystem."""

    def __init__(self, policy: PolicyInstance, sim) -> None:
        self.sim = sim
        self.subs = policy.subsystems
        self.owner = policy.owner_map()
        self.idle = [list(range(s.lo, s.hi)) for s in self.subs]
        self.waiting = [deque() for _ in self.subs]
        self.route = _Router(policy, sim)
        self.max_waiting = 0

    def on_arrival(self, job) -> None:
        s = self.route(job)
        sub = self.subs[s]
        job.subsystem = sub.label
        job.lo, job.hi = sub.lo, sub.hi
        job.target = sub.replicas
        waiting = self.waiting[s]
        if not waiting and len(self.idle[s]) >= sub.replicas:
            self._launch(s, job)
        else:
            waiting.append(job)
            if len(waiting) > self.max_waiting:
                self.max_waiting = len(waiting)

    def _launch(self, s: int, job) -> None:
        idle = self.idle[s]
        start = self.sim.start_on_idle
        for _ in range(job.target):
            start(job, heapq.heappop(idle))

    def on_idle(self, servers) -> None:
        touched = set()
        for srv in servers:
            s = self.owner[srv]
            heapq.heappush(self.idle[s], srv)
            touched.add(s)
        for s in touched:
            waiting = self.waiting[s]
            need = self.subs[s].replicas
            while waiting and len(self.idle[s]) >= need:
                self._launch(s, waiting.popleft())

    def stats(self) -> dict:
        return {"max_dispatcher_queue": self.max_waiting}


class _LiteralFrecRuntime:
    """FREC as literally described: replicas everywhere, cancelled once ``R`` have started."""

    def __init__(self, policy: PolicyInstance, sim) -> None:
        self.sim = sim
        self.subs = policy.subsystems
        self.route = _Router(policy, sim)

    def on_arrival(self, job) -> None:
        sub = self.subs[self.route(job)]
        job.subsystem = sub.label
        job.lo, job.hi = sub.lo, sub.hi
        job.target = sub.replicas
        sim = self.sim
        idle = [srv for srv in range(sub.lo, sub.hi) if sim.is_idle(srv)]
        if len(idle) >= sub.replicas:
            for srv in idle[: sub.replicas]:
                sim.start_on_idle(job, srv)
            return
        for srv in range(sub.lo, sub.hi):
            sim.assign(job, srv)
            if job.started >= job.target:
                break

    def on_service_start(self, rep) -> None:
        job = rep.job
        if job.started == job.target:
            self.sim.cancel_queued(job)

    def on_idle(self, servers) -> None:
        pass


class _PoolClock:
    """Time integral of the indicator ``idle large-pool servers < R`` inside the measurement window."""

    def __init__(self, sim, count: int) -> None:
        self.sim = sim
        self.area = [0.0] * count
        self.last = [0.0] * count

    def advance(self, s: int, short: bool) -> None:
        now = self.sim.now
        lo = max(self.last[s], self.sim.warmup)
        hi = min(now, self.sim.window_end)
        if short and hi > lo:
            self.area[s] += hi - lo
        self.last[s] = now

    def averages(self) -> list[float]:
        span = self.sim.window_end - self.sim.warmup
        return [a / span if span > 0 else math.nan for a in self.area]


class _DqRuntime:
    def __init__(self, policy: PolicyInstance, sim) -> None:
        self.sim = sim
        self.subs = policy.subsystems
        self.owner = policy.owner_map()
        self.large = [list(range(s.lo, s.large_hi)) for s in self.subs]
        self.route = _Router(policy, sim)
        self.stream = sim.server_stream
        self.clock = _PoolClock(sim, len(self.subs))
        self.diverted = [0] * len(self.subs)

    def _short(self, s: int) -> bool:
        return len(self.large[s]) < self.subs[s].replicas

    def on_arrival(self, job) -> None:
        s = self.route(job)
        sub = self.subs[s]
        job.subsystem = sub.label
        job.lo, job.hi = sub.lo, sub.hi
        idle = self.large[s]
        if len(idle) >= sub.replicas:
            self.clock.advance(s, False)
            job.target = sub.replicas
            for _ in range(sub.replicas):
                self.sim.start_on_idle(job, heapq.heappop(idle))
            return
        job.diverted = True
        job.target = job.k
        self.diverted[s] += 1
        for srv in distinct_servers(self.stream, sub.large_hi, sub.small, job.k):
            self.sim.assign(job, srv)

    def on_idle(self, servers) -> None:
        for srv in servers:
            s = self.owner[srv]
            if srv < self.subs[s].large_hi:
                self.clock.advance(s, self._short(s))
                heapq.heappush(self.large[s], srv)

    def stats(self) -> dict:
        for s in range(len(self.subs)):
            self.clock.advance(s, self._short(s))
        return {
            "short_large_pool_fraction": self.clock.averages(),
            "diverted_arrivals": list(self.diverted),
        }


class _SbDqRuntime:
    """Size-based DQ: large pool, then small pool, then a dispatcher FIFO, all with batch starts."""

    def __init__(self, policy: PolicyInstance, sim) -> None:
        self.sim = sim
        self.subs = policy.subsystems
        self.owner = policy.owner_map()
        self.large = [list(range(s.lo, s.large_hi)) for s in self.subs]
        self.small = [list(range(s.large_hi, s.hi)) for s in self.subs]
        self.waiting = [deque() for _ in self.subs]
        self.route = _Router(policy, sim)
        self.max_waiting = 0

    def _try(self, s: int, job) -> bool:
        r = self.subs[s].replicas
        for pool in (self.large[s], self.small[s]):
            if len(pool) >= r:
                for _ in range(r):
                    self.sim.start_on_idle(job, heapq.heappop(pool))
                return True
        return False

    def on_arrival(self, job) -> None:
        s = self.route(job)
        sub = self.subs[s]
        job.subsystem = sub.label
        job.lo, job.hi = sub.lo, sub.hi
        job.target = sub.replicas
        job.diverted = len(self.large[s]) < sub.replicas
        waiting = self.waiting[s]
        if waiting or not self._try(s, job):
            job.diverted = True
            waiting.append(job)
            self.max_waiting = max(self.max_waiting, len(waiting))

    def on_idle(self, servers) -> None:
        touched = set()
        for srv in servers:
            s = self.owner[srv]
            pool = self.large[s] if srv < self.subs[s].large_hi else self.small[s]
            heapq.heappush(pool, srv)
            touched.add(s)
        for s in touched:
            waiting = self.waiting[s]
            while waiting and self._try(s, waiting[0]):
                waiting.popleft()

    def stats(self) -> dict:
        return {"max_dispatcher_queue": self.max_waiting}
