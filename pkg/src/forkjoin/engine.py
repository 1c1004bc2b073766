"""Discrete-event core for partial fork-join systems with replication.

Servers are FIFO queues.  A job of ``k`` tasks is done when any ``k`` of its
replicas finish; its remaining replicas are removed at that instant.  The
policy object decides where replicas go; the engine owns all state and the
clock.  Everything runs on one thread and is deterministic given the seed.
"""

from __future__ import annotations

import heapq
import itertools
import math
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .analytics import DEFAULT_BATCHES, Estimate, batch_means, WAIT_EPS
from .errors import ContractViolation
from .model import (
    STREAM_ARRIVALS,
    STREAM_ROUTING,
    STREAM_SERVERS,
    STREAM_SIZES,
    STREAM_SLOWDOWNS,
    RngStream,
    SystemParams,
)

ARRIVAL = 0
COMPLETION = 1

QUEUED = 0
IN_SERVICE = 1
FINISHED = 2
CANCELLED = 3

KIND_NAMES = {ARRIVAL: "arrival", COMPLETION: "completion"}


class Job:
    __slots__ = (
        "job_id", "arrival", "size", "k", "completions", "started", "replicas",
        "in_service", "service_clock", "last_transition", "departure",
        "subsystem", "target", "diverted", "lo", "hi",
    )

    def __init__(self, job_id: int, arrival: float, size: float, k: int) -> None:
        self.job_id = job_id
        self.arrival = arrival
        self.size = size
        self.k = k
        self.completions = 0
        self.started = 0
        self.replicas: list[Replica] = []
        self.in_service = 0
        self.service_clock = 0.0
        self.last_transition = arrival
        self.departure: float | None = None
        self.subsystem = 0
        self.target = k
        self.diverted = False
        self.lo = 0
        self.hi = 0


class Replica:
    __slots__ = ("job", "server", "state", "start", "service_time", "end")

    def __init__(self, job: Job, server: int) -> None:
        self.job = job
        self.server = server
        self.state = QUEUED
        self.start = math.nan
        self.service_time = math.nan
        self.end = math.nan


def accrue_service_clock(job: Job, now: float) -> None:
    """Credit ``now - last_transition`` to the job's service clock if a replica was in service."""
    if job.in_service > 0:
        job.service_clock += now - job.last_transition
    job.last_transition = now


@dataclass
class JobTable:
    """Per-job metrics of the measured jobs, in arrival order."""

    job_id: np.ndarray
    arrival: np.ndarray
    size: np.ndarray
    subsystem: np.ndarray
    replicas: np.ndarray
    diverted: np.ndarray
    delay: np.ndarray
    service: np.ndarray

    @property
    def queueing(self) -> np.ndarray:
        return self.delay - self.service

    def __len__(self) -> int:
        return len(self.delay)


@dataclass
class SimulationResult:
    jobs: JobTable
    horizon: float
    warmup: float
    window_end: float
    end_time: float
    arrived: int
    departed: int
    live: int
    arrived_in_window: int
    censored: int
    live_time_average: float
    busy_time_average: float
    event_count: int
    wall_seconds: float
    aborted: bool = False
    abort_reason: str = ""
    live_samples: tuple[np.ndarray, np.ndarray] = field(default_factory=lambda: (np.empty(0), np.empty(0)))
    busy_time_total: float = 0.0
    replica_time_total: float = 0.0
    max_started: int = 0
    trace: list[tuple] | None = None
    policy_stats: dict = field(default_factory=dict)
    batches: int = DEFAULT_BATCHES

    @property
    def mean_delay(self) -> float:
        return float(self.jobs.delay.mean()) if len(self.jobs) else math.nan

    @property
    def mean_service(self) -> float:
        return float(self.jobs.service.mean()) if len(self.jobs) else math.nan

    @property
    def mean_queueing(self) -> float:
        return float(self.jobs.queueing.mean()) if len(self.jobs) else math.nan

    @property
    def prob_wait(self) -> float:
        return float((self.jobs.queueing > WAIT_EPS).mean()) if len(self.jobs) else math.nan

    def ci(self, metric: str) -> Estimate:
        values = {
            "delay": self.jobs.delay,
            "service": self.jobs.service,
            "queueing": self.jobs.queueing,
            "wait": (self.jobs.queueing > WAIT_EPS).astype(float),
        }[metric]
        return batch_means(values, self.batches)

    def little_residual(self) -> float:
        """Relative gap between the time-average job count and rate times mean delay.

        Jobs arriving in the window that never departed are censored; they bias
        the residual slightly, so it is only meaningful for stable runs.
        """
        span = self.window_end - self.warmup
        if span <= 0 or not len(self.jobs) or self.live_time_average == 0:
            return math.nan
        rate = self.arrived_in_window / span
        return abs(self.live_time_average - rate * self.mean_delay) / self.live_time_average


class Simulator:
    """Event loop plus the state-mutation primitives that policies call.

    Policies interact through :meth:`assign` (create a replica on a server,
    starting it if the server is idle), :meth:`start_on_idle` (same, but the
    server must be idle) and :meth:`cancel_queued`.
    """

    def __init__(
        self,
        params: SystemParams,
        sizes,
        slowdowns,
        policy,
        *,
        horizon: float,
        warmup: float | None = None,
        seed: int = 0,
        drain_margin: float | None = None,
        explosion_factor: float = 100.0,
        trace: bool = False,
        samples: int = 2048,
        batches: int = DEFAULT_BATCHES,
        scripted_arrivals: list[tuple[float, float]] | None = None,
    ) -> None:
        if warmup is None:
            warmup = 0.1 * horizon
        if not horizon > warmup >= 0:
            raise ValueError(f"need horizon > warmup >= 0, got horizon={horizon}, warmup={warmup}")
        self.params = params
        self.n = params.n
        self.sizes = sizes
        self.slowdowns = slowdowns
        self.horizon = float(horizon)
        self.warmup = float(warmup)
        if drain_margin is None:
            drain_margin = 5.0 * sizes.mean() * (1.0 + 1.0 / slowdowns.mu)
        self.window_end = max(self.warmup, self.horizon - drain_margin)
        self.explosion_threshold = explosion_factor * params.n
        self.seed = seed
        self.batches = batches

        self.arrival_stream = RngStream(seed, STREAM_ARRIVALS)
        self.size_stream = RngStream(seed, STREAM_SIZES)
        self.slowdown_stream = RngStream(seed, STREAM_SLOWDOWNS)
        self.routing_stream = RngStream(seed, STREAM_ROUTING)
        self.server_stream = RngStream(seed, STREAM_SERVERS)
        self._scripted = deque(scripted_arrivals) if scripted_arrivals is not None else None

        n = params.n
        self.current: list[Replica | None] = [None] * n
        self.fifo: list[deque] = [deque() for _ in range(n)]
        self.busy_since = [0.0] * n
        self.busy_time = [0.0] * n
        self.busy = 0
        self.live = 0
        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()
        self._trace: list[tuple] | None = [] if trace else None
        self._idle_batch: list[int] = []
        self._replica_time = 0.0
        self._max_started = 0

        self._sample_dt = self.horizon / samples
        self._sample_t: list[float] = []
        self._sample_v: list[int] = []

        self.policy = policy.runtime(self)
        self._start_hook = getattr(self.policy, "on_service_start", None)

    # -- primitives used by policies ---------------------------------------

    def assign(self, job: Job, server: int) -> Replica:
        """Create a replica of ``job`` at ``server``: start it now if the server is idle, else queue it."""
        if not job.lo <= server < job.hi:
            raise ContractViolation(
                f"server {server} outside the partition [{job.lo}, {job.hi}) of job {job.job_id}"
            )
        rep = Replica(job, server)
        job.replicas.append(rep)
        if self.current[server] is None and not self.fifo[server]:
            self._start(rep, server)
        else:
            self.fifo[server].append(rep)
        return rep

    def start_on_idle(self, job: Job, server: int) -> Replica:
        if not job.lo <= server < job.hi:
            raise ContractViolation(
                f"server {server} outside the partition [{job.lo}, {job.hi}) of job {job.job_id}"
            )
        if self.current[server] is not None:
            raise ContractViolation(f"server {server} is busy")
        rep = Replica(job, server)
        job.replicas.append(rep)
        self._start(rep, server)
        return rep

    def cancel_queued(self, job: Job) -> None:
        """Cancel every replica of ``job`` that has not started (removed lazily from the FIFOs)."""
        trace = self._trace
        for rep in job.replicas:
            if rep.state == QUEUED:
                rep.state = CANCELLED
                if trace is not None:
                    trace.append((self.now, next(self._seq), "cancel", job.job_id, rep.server))

    def is_idle(self, server: int) -> bool:
        return self.current[server] is None

    # -- internals ------------------------------------------------------------

    def _start(self, rep: Replica, server: int) -> None:
        now = self.now
        job = rep.job
        if job.in_service > 0:
            job.service_clock += now - job.last_transition
        job.last_transition = now
        job.in_service += 1
        job.started += 1
        dur = job.size * (1.0 + self.slowdowns.sample(job.size, self.slowdown_stream))
        rep.state = IN_SERVICE
        rep.start = now
        rep.service_time = dur
        self.current[server] = rep
        self.busy_since[server] = now
        self.busy += 1
        seq = next(self._seq)
        heapq.heappush(self._heap, (now + dur, seq, COMPLETION, rep))
        if self._trace is not None:
            self._trace.append((now, seq, "start", job.job_id, server))
        if self._start_hook is not None:
            self._start_hook(rep)

    def _stop(self, rep: Replica, now: float) -> None:
        server = rep.server
        rep.end = now
        self._replica_time += now - rep.start
        self.busy_time[server] += now - self.busy_since[server]
        self.current[server] = None
        self.busy -= 1

    def _pull(self, server: int) -> None:
        fifo = self.fifo[server]
        while fifo:
            rep = fifo.popleft()
            if rep.state == QUEUED:
                self._start(rep, server)
                return
        self._idle_batch.append(server)

    def _schedule_arrival(self, after: float) -> None:
        if self._scripted is not None:
            if self._scripted:
                t, x = self._scripted.popleft()
                heapq.heappush(self._heap, (t, next(self._seq), ARRIVAL, x))
            return
        t = after + self.arrival_stream.exponential(self.params.job_rate)
        if t <= self.horizon:
            heapq.heappush(self._heap, (t, next(self._seq), ARRIVAL, None))

    # -- main loop --------------------------------------------------------------

    def run(self) -> SimulationResult:
        wall0 = time.perf_counter()
        heap = self._heap
        horizon = self.horizon
        warm = self.warmup
        wend = self.window_end
        policy = self.policy
        trace = self._trace
        k = self.params.k
        sizes = self.sizes
        size_stream = self.size_stream
        heappop = heapq.heappop

        live_area = 0.0
        busy_area = 0.0
        t_last = 0.0
        next_sample = 0.0
        sample_dt = self._sample_dt
        samples_t = self._sample_t
        samples_v = self._sample_v

        m_id: list[int] = []
        m_arr: list[float] = []
        m_size: list[float] = []
        m_sub: list[int] = []
        m_rep: list[int] = []
        m_div: list[bool] = []
        m_w: list[float] = []
        m_ws: list[float] = []

        arrived = departed = in_window = 0
        events = 0
        aborted = False
        reason = ""
        next_id = 0
        idle_batch = self._idle_batch

        self._schedule_arrival(0.0)
        while heap:
            t, seq, kind, obj = heappop(heap)
            if t > horizon:
                heapq.heappush(heap, (t, seq, kind, obj))
                break
            if kind == COMPLETION and obj.state != IN_SERVICE:
                continue  # replica cancelled while in service
            events += 1
            if t > t_last:
                while next_sample <= t:
                    samples_t.append(next_sample)
                    samples_v.append(self.live)
                    next_sample += sample_dt
                lo = t_last if t_last > warm else warm
                hi = t if t < wend else wend
                if hi > lo:
                    live_area += self.live * (hi - lo)
                    busy_area += self.busy * (hi - lo)
                t_last = t
            self.now = t

            if kind == ARRIVAL:
                x = obj if obj is not None else sizes.sample(size_stream)
                job = Job(next_id, t, x, k)
                next_id += 1
                arrived += 1
                if warm < t <= wend:
                    in_window += 1
                self.live += 1
                if trace is not None:
                    trace.append((t, next(self._seq), "arrival", job.job_id, -1))
                policy.on_arrival(job)
                if idle_batch:
                    servers = idle_batch[:]
                    idle_batch.clear()
                    policy.on_idle(servers)
                self._schedule_arrival(t)
                if self.live > self.explosion_threshold:
                    aborted = True
                    reason = (
                        f"instability suspected: {self.live} live jobs exceed "
                        f"{self.explosion_threshold:g} at t={t:.6g}"
                    )
                    break
                continue

            # Service completion.
            rep = obj
            job = rep.job
            server = rep.server
            rep.state = FINISHED
            self._stop(rep, t)
            if job.in_service > 0:
                job.service_clock += t - job.last_transition
            job.last_transition = t
            job.in_service -= 1
            job.completions += 1
            if trace is not None:
                trace.append((t, next(self._seq), "completion", job.job_id, server))
            freed = [server]
            if job.completions >= job.k:
                for sib in job.replicas:
                    st = sib.state
                    if st == QUEUED:
                        sib.state = CANCELLED
                        if trace is not None:
                            trace.append((t, next(self._seq), "cancel", job.job_id, sib.server))
                    elif st == IN_SERVICE:
                        sib.state = CANCELLED
                        self._stop(sib, t)
                        freed.append(sib.server)
                        if trace is not None:
                            trace.append((t, next(self._seq), "cancel", job.job_id, sib.server))
                job.in_service = 0
                job.departure = t
                self.live -= 1
                departed += 1
                if job.started > self._max_started:
                    self._max_started = job.started
                if trace is not None:
                    trace.append((t, next(self._seq), "departure", job.job_id, -1))
                if warm < job.arrival <= wend:
                    w = t - job.arrival
                    ws = job.service_clock
                    if ws > w:
                        ws = w
                    m_id.append(job.job_id)
                    m_arr.append(job.arrival)
                    m_size.append(job.size)
                    m_sub.append(job.subsystem)
                    m_rep.append(job.started)
                    m_div.append(job.diverted)
                    m_w.append(w)
                    m_ws.append(ws)
                job.replicas = ()
            for s in freed:
                self._pull(s)
            if idle_batch:
                servers = idle_batch[:]
                idle_batch.clear()
                policy.on_idle(servers)

        end = min(self.now if aborted else horizon, horizon)
        if not aborted:
            lo = t_last if t_last > warm else warm
            hi = wend
            if hi > lo:
                live_area += self.live * (hi - lo)
                busy_area += self.busy * (hi - lo)
            while next_sample <= end:
                samples_t.append(next_sample)
                samples_v.append(self.live)
                next_sample += sample_dt
        # Close out in-service replicas so busy time and replica time agree at the end.
        busy_total = 0.0
        replica_total = self._replica_time
        for s in range(self.n):
            busy = self.busy_time[s]
            rep = self.current[s]
            if rep is not None:
                busy += end - self.busy_since[s]
                replica_total += end - rep.start
            busy_total += busy

        order = np.argsort(np.asarray(m_id, dtype=np.int64), kind="stable")
        table = JobTable(
            job_id=np.asarray(m_id, dtype=np.int64)[order],
            arrival=np.asarray(m_arr, dtype=float)[order],
            size=np.asarray(m_size, dtype=float)[order],
            subsystem=np.asarray(m_sub, dtype=np.int64)[order],
            replicas=np.asarray(m_rep, dtype=np.int64)[order],
            diverted=np.asarray(m_div, dtype=bool)[order],
            delay=np.asarray(m_w, dtype=float)[order],
            service=np.asarray(m_ws, dtype=float)[order],
        )
        span = wend - warm
        stats_fn = getattr(policy, "stats", None)
        return SimulationResult(
            jobs=table,
            horizon=self.horizon,
            warmup=warm,
            window_end=wend,
            end_time=end,
            arrived=arrived,
            departed=departed,
            live=self.live,
            arrived_in_window=in_window,
            censored=in_window - len(table),
            live_time_average=live_area / span if span > 0 else math.nan,
            busy_time_average=busy_area / span if span > 0 else math.nan,
            event_count=events,
            wall_seconds=time.perf_counter() - wall0,
            aborted=aborted,
            abort_reason=reason,
            live_samples=(np.asarray(samples_t), np.asarray(samples_v, dtype=float)),
            busy_time_total=busy_total,
            replica_time_total=replica_total,
            max_started=self._max_started,
            trace=trace,
            policy_stats=stats_fn() if stats_fn is not None else {},
            batches=self.batches,
        )


def run_simulation(
    params: SystemParams,
    sizes,
    slowdowns,
    policy,
    horizon: float,
    warmup: float | None = None,
    seed: int = 0,
    **options,
) -> SimulationResult:
    """Simulate ``policy`` up to ``horizon`` and return post-warmup job metrics."""
    sim = Simulator(params, sizes, slowdowns, policy, horizon=horizon, warmup=warmup, seed=seed, **options)
    return sim.run()


def format_trace(trace: list[tuple]) -> str:
    """Tab-separated ``time, sequence, kind, job_id, server_id`` lines."""
    return "".join(f"{t!r}\t{seq}\t{kind}\t{job}\t{server}\n" for t, seq, kind, job, server in trace)


def routing_uniform(sim: Simulator) -> float:
    return sim.routing_stream.random()


__all__ = [
    "Job",
    "Replica",
    "Simulator",
    "SimulationResult",
    "JobTable",
    "accrue_service_clock",
    "run_simulation",
    "format_trace",
    "QUEUED",
    "IN_SERVICE",
    "FINISHED",
    "CANCELLED",
    "STREAM_ROUTING",
]
