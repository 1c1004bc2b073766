"""System parameters, task-size laws, slowdown laws and the per-symbol arithmetic.

A replica of size ``x`` that starts service takes ``x * (1 + S)`` time units,
where ``S`` is a slowdown drawn from the conditional law ``F_x``.  Conditioned
on ``x`` the slowdowns of the replicas of one job are i.i.d.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy import integrate, special

from .errors import ConfigurationError, DomainError, NumericalError

QUAD_EPSABS = 1e-8
TAIL_MASS = 1e-12


# --------------------------------------------------------------------------
# System parameters
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SystemParams:
    """``n`` servers, ``k`` tasks per job, jobs arrive at rate ``lam * n / k``.

    ``mu`` is the inverse mean slowdown and ``alpha`` the heavy-traffic
    exponent used to size the spare capacity of the asymptotic policies.
    """

    n: int
    k: int
    lam: float
    mu: float
    alpha: float = 0.6

    def __post_init__(self) -> None:
        if not isinstance(self.n, (int, np.integer)) or self.n < 1:
            raise ConfigurationError(f"n must be a positive integer, got {self.n!r}")
        if not isinstance(self.k, (int, np.integer)) or self.k < 1:
            raise ConfigurationError(f"k must be a positive integer, got {self.k!r}")
        if self.k > self.n:
            raise ConfigurationError(f"k={self.k} exceeds n={self.n}")
        if not self.lam > 0:
            raise ConfigurationError(f"lambda must be positive, got {self.lam!r}")
        if not self.mu > 0:
            raise ConfigurationError(f"mu must be positive, got {self.mu!r}")
        if not 0.5 < self.alpha < 1.0:
            raise ConfigurationError(f"alpha must lie in (1/2, 1), got {self.alpha!r}")
        if not math.isfinite(1.0 / self.lam - 1.0 / self.mu):
            raise ConfigurationError("r* = 1/lambda - 1/mu is not finite")

    @property
    def job_rate(self) -> float:
        return self.lam * self.n / self.k

    @property
    def r_star(self) -> float:
        return r_star(self)

    def routing_probability(self) -> float:
        """``(p_k - 2 n^(alpha-1))^+``: share of jobs sent to the larger-batch subsystem."""
        return max(p_k(self) - 2.0 * self.n ** (self.alpha - 1.0), 0.0)


def r_star(params: SystemParams) -> float:
    """Replication budget per task, ``1/lambda - 1/mu``."""
    return 1.0 / params.lam - 1.0 / params.mu


def is_stabilizable(params: SystemParams) -> bool:
    """True iff some admissible policy is stable, i.e. ``lambda < 1 / (1 + 1/mu)``."""
    return params.lam < 1.0 / (1.0 + 1.0 / params.mu)


def _ceil_rk(params: SystemParams) -> tuple[int, float]:
    rk = r_star(params) * params.k
    # Guard against r*k landing a hair above an integer through rounding.
    nearest = round(rk)
    if abs(rk - nearest) <= 1e-9 * max(1.0, abs(rk)):
        return int(nearest), float(nearest)
    return math.ceil(rk), rk


def batch_sizes(params: SystemParams) -> tuple[int, int]:
    """``(ceil(r* k), ceil(r* k) - 1)``."""
    if r_star(params) <= 1.0:
        raise DomainError(f"r* = {r_star(params):.6g} <= 1: no stable policy exists")
    c, _ = _ceil_rk(params)
    return c, c - 1


def p_k(params: SystemParams) -> float:
    """Mixing weight on ``ceil(r* k)`` so the mean replica count is exactly ``r* k``."""
    if r_star(params) <= 1.0:
        raise DomainError(f"r* = {r_star(params):.6g} <= 1: no stable policy exists")
    c, rk = _ceil_rk(params)
    return rk - c + 1.0


# --------------------------------------------------------------------------
# Random streams
# --------------------------------------------------------------------------


class RngStream:
    """One named, replayable stream of random numbers.

    Streams are derived from ``(seed, stream_id)`` with numpy's ``SeedSequence``
    spawn keys, so distinct ids are statistically independent and identical
    pairs replay identical sequences.  Draws are buffered in blocks because
    the event loop consumes them one at a time.
    """

    __slots__ = ("seed", "stream_id", "generator", "_chunk", "_u", "_ui", "_e", "_ei", "_gamma")

    MAX_GAMMA_BUFFERS = 64

    def __init__(self, seed: int, stream_id: int, chunk: int = 4096) -> None:
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.PCG64(seq))
        self._chunk = chunk
        self._u: list[float] = []
        self._ui = 0
        self._e: list[float] = []
        self._ei = 0
        self._gamma: dict[float, list] = {}

    def random(self) -> float:
        if self._ui >= len(self._u):
            self._u = self.generator.random(self._chunk).tolist()
            self._ui = 0
        v = self._u[self._ui]
        self._ui += 1
        return v

    def exponential(self, rate: float = 1.0) -> float:
        if self._ei >= len(self._e):
            self._e = self.generator.standard_exponential(self._chunk).tolist()
            self._ei = 0
        v = self._e[self._ei]
        self._ei += 1
        return v / rate

    def gamma(self, shape: float, scale: float) -> float:
        buf = self._gamma.get(shape)
        if buf is None:
            if len(self._gamma) >= self.MAX_GAMMA_BUFFERS:
                return float(self.generator.standard_gamma(shape)) * scale
            buf = self._gamma[shape] = [[], 0]
        if buf[1] >= len(buf[0]):
            buf[0] = self.generator.standard_gamma(shape, self._chunk).tolist()
            buf[1] = 0
        v = buf[0][buf[1]]
        buf[1] += 1
        return v * scale


# Stream ids used by the simulator.
STREAM_ARRIVALS = 0
STREAM_SIZES = 1
STREAM_SLOWDOWNS = 2
STREAM_ROUTING = 3
STREAM_SERVERS = 4


# --------------------------------------------------------------------------
# Task sizes
# --------------------------------------------------------------------------


class TaskSizeDistribution(Protocol):
    def mean(self) -> float: ...

    def sample(self, stream: RngStream) -> float: ...

    def grid(self, m: int) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass(frozen=True)
class Deterministic:
    value: float = 1.0

    def __post_init__(self) -> None:
        if not self.value > 0:
            raise ConfigurationError(f"deterministic task size must be positive, got {self.value}")

    def mean(self) -> float:
        return self.value

    def sample(self, stream: RngStream) -> float:
        return self.value

    def grid(self, m: int = 1) -> tuple[np.ndarray, np.ndarray]:
        return np.array([self.value]), np.array([1.0])


@dataclass(frozen=True)
class ExponentialSize:
    mean_value: float = 1.0

    def __post_init__(self) -> None:
        if not self.mean_value > 0:
            raise ConfigurationError("exponential task-size mean must be positive")

    def mean(self) -> float:
        return self.mean_value

    def sample(self, stream: RngStream) -> float:
        return stream.exponential(1.0 / self.mean_value)

    def grid(self, m: int = 64) -> tuple[np.ndarray, np.ndarray]:
        # Conditional mean on each equal-probability quantile cell; preserves the mean.
        u = np.linspace(0.0, 1.0, m + 1)
        v = 1.0 - u
        with np.errstate(divide="ignore", invalid="ignore"):
            h = np.where(v > 0, v * np.log(np.where(v > 0, v, 1.0)), 0.0) + u
        xs = self.mean_value * np.diff(h) * m
        return xs, np.full(m, 1.0 / m)


@dataclass(frozen=True)
class ParetoSize:
    """Classic Pareto with tail index ``shape > 1``; ``scale=None`` normalizes to unit mean."""

    shape: float
    scale: float | None = None

    def __post_init__(self) -> None:
        if not self.shape > 1.0:
            raise ConfigurationError("Pareto shape must exceed 1 for a finite mean")
        if self.scale is not None and not self.scale > 0:
            raise ConfigurationError("Pareto scale must be positive")

    @property
    def x_min(self) -> float:
        return (self.shape - 1.0) / self.shape if self.scale is None else self.scale

    def mean(self) -> float:
        return self.shape * self.x_min / (self.shape - 1.0)

    def sample(self, stream: RngStream) -> float:
        return self.x_min * (1.0 - stream.random()) ** (-1.0 / self.shape)

    def grid(self, m: int = 64) -> tuple[np.ndarray, np.ndarray]:
        a = self.shape
        u = np.linspace(0.0, 1.0, m + 1)
        h = -self.x_min * a / (a - 1.0) * (1.0 - u) ** ((a - 1.0) / a)
        xs = np.diff(h) * m
        return xs, np.full(m, 1.0 / m)


@dataclass(frozen=True)
class DiscreteGrid:
    """Finitely many task sizes with probabilities."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if not self.points:
            raise ConfigurationError("discrete grid needs at least one point")
        xs = [p[0] for p in self.points]
        ws = [p[1] for p in self.points]
        if any(x <= 0 for x in xs):
            raise ConfigurationError("task sizes must be positive")
        if any(w < 0 for w in ws):
            raise ConfigurationError("grid weights must be nonnegative")
        if abs(sum(ws) - 1.0) > 1e-12:
            raise ConfigurationError(f"grid weights sum to {sum(ws)!r}, not 1")
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ConfigurationError("grid points must be strictly increasing")
        object.__setattr__(self, "_cum", np.cumsum(ws))

    @classmethod
    def from_arrays(cls, xs, ws) -> DiscreteGrid:
        return cls(tuple((float(x), float(w)) for x, w in zip(xs, ws)))

    def mean(self) -> float:
        return float(sum(x * w for x, w in self.points))

    def sample(self, stream: RngStream) -> float:
        j = int(np.searchsorted(self._cum, stream.random(), side="right"))
        return self.points[min(j, len(self.points) - 1)][0]

    def grid(self, m: int = 0) -> tuple[np.ndarray, np.ndarray]:
        return np.array([p[0] for p in self.points]), np.array([p[1] for p in self.points])


# --------------------------------------------------------------------------
# Slowdown models
# --------------------------------------------------------------------------


class SlowdownModel(Protocol):
    mu: float

    def sample(self, x: float, stream: RngStream) -> float: ...

    def order_stat_mean(self, i: int, r: int, x: float) -> float: ...


def _check_order(i: int, r: int) -> None:
    if not 1 <= i <= r:
        raise DomainError(f"order statistic index i={i} outside 1..r={r}")


def exp_order_stat_mean(i: int, r: int, mu: float) -> float:
    """Mean of the i-th smallest of r i.i.d. exponentials with rate mu."""
    _check_order(i, r)
    return math.fsum(1.0 / (r - j) for j in range(i)) / mu


@dataclass(frozen=True)
class ExponentialSlowdown:
    """Slowdowns i.i.d. exponential with mean ``1/mu``, independent of the task size."""

    mu: float = 1.0

    def __post_init__(self) -> None:
        if not self.mu > 0:
            raise ConfigurationError("slowdown mu must be positive")

    def sample(self, x: float, stream: RngStream) -> float:
        return stream.exponential(self.mu)

    def order_stat_mean(self, i: int, r: int, x: float = 0.0) -> float:
        return exp_order_stat_mean(i, r, self.mu)

    def order_stat_table(self, x: float, r_max: int, i_max: int) -> np.ndarray:
        out = np.full((i_max + 1, r_max + 1), np.nan)
        for r in range(1, r_max + 1):
            acc = 0.0
            for i in range(1, min(i_max, r) + 1):
                acc += 1.0 / (r - i + 1)
                out[i, r] = acc / self.mu
        return out


class _TableCache:
    """Thread-safe memo of order-statistic means keyed by ``(i, r, x)``."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._data: dict[tuple[int, int, float], float] = {}

    def get(self, key):
        with self._lock:
            return self._data.get(key)

    def update(self, items) -> None:
        with self._lock:
            self._data.update(items)

    def __getstate__(self):
        return dict(self._data)

    def __setstate__(self, state) -> None:
        self._lock = threading.Lock()
        self._data = state


@dataclass(frozen=True)
class GammaSlowdown:
    """Size-based slowdowns: given ``X = x`` the slowdown is Gamma with shape
    ``kappa(x) = max(shape_coeff * x, shape_floor)`` and rate ``kappa(x) * mu``.

    The conditional mean is ``1/mu`` for every ``x`` while the conditional
    variance ``1 / (kappa(x) mu^2)`` shrinks as tasks get larger.
    """

    mu: float = 1.0
    shape_coeff: float = 1.0
    shape_floor: float = 1e-3
    _cache: _TableCache = field(default_factory=_TableCache, compare=False, repr=False, hash=False)

    def __post_init__(self) -> None:
        if not (self.mu > 0 and self.shape_coeff > 0 and self.shape_floor > 0):
            raise ConfigurationError("Gamma slowdown parameters must be positive")

    def shape(self, x: float) -> float:
        return max(self.shape_coeff * x, self.shape_floor)

    def sample(self, x: float, stream: RngStream) -> float:
        kappa = self.shape(x)
        return stream.gamma(kappa, 1.0 / (kappa * self.mu))

    def variance(self, x: float) -> float:
        return 1.0 / (self.shape(x) * self.mu**2)

    def survival(self, s, x: float):
        kappa = self.shape(x)
        return special.gammaincc(kappa, np.asarray(s) * kappa * self.mu)

    def order_stat_mean(self, i: int, r: int, x: float) -> float:
        _check_order(i, r)
        if x < 0:
            raise DomainError("task size must be nonnegative")
        key = (i, r, float(x))
        hit = self._cache.get(key)
        if hit is None:
            self.order_stat_table(x, r, i)
            hit = self._cache.get(key)
        return hit

    def order_stat_table(self, x: float, r_max: int, i_max: int) -> np.ndarray:
        """Array ``E[i, r] = E[S_[i:r] | X=x]`` for ``1 <= i <= min(i_max, r)``, ``r <= r_max``.

        Missing entries are filled by one vector-valued adaptive quadrature of
        ``P(S_[i:r] > s) = P(Binomial(r, F(s)) <= i-1)`` over ``s``.
        """
        x = float(x)
        pairs = [(i, r) for r in range(1, r_max + 1) for i in range(1, min(i_max, r) + 1)]
        missing = [p for p in pairs if self._cache.get((p[0], p[1], x)) is None]
        if missing:
            values = _gamma_order_stat_means(self.shape(x), self.mu, tuple(missing))
            self._cache.update({(i, r, x): v for (i, r), v in zip(missing, values)})
        out = np.full((i_max + 1, r_max + 1), np.nan)
        for i, r in pairs:
            out[i, r] = self._cache.get((i, r, x))
        return out


def _gamma_order_stat_means(kappa: float, mu: float, pairs: tuple[tuple[int, int], ...]) -> np.ndarray:
    rate = kappa * mu
    r_top = max(r for _, r in pairs)
    a = np.array([r - i + 1 for i, r in pairs], dtype=float)
    b = np.array([i for i, _ in pairs], dtype=float)

    def surv(s: float) -> np.ndarray:
        fbar = special.gammaincc(kappa, s * rate)
        return special.betainc(a, b, fbar)

    # Beyond s_max every order statistic has survival below r * P(S > s_max) = TAIL_MASS.
    s_max = float(special.gammainccinv(kappa, TAIL_MASS / r_top)) / rate
    levels = [1e-6, 1e-3, 1e-2, 0.1, 0.5]
    pts = [float(special.gammaincinv(kappa, q)) / rate for q in levels]
    pts += [float(special.gammainccinv(kappa, q)) / rate for q in (0.1, 1e-2, 1e-4, 1e-6, 1e-9)]
    pts = sorted({p for p in pts if 0.0 < p < s_max and math.isfinite(p)})
    edges = [0.0, *pts, s_max]
    total = np.zeros(len(pairs))
    err = 0.0
    for lo, hi in zip(edges, edges[1:]):
        if hi <= lo:
            continue
        val, e, info = integrate.quad_vec(
            surv, lo, hi, epsabs=QUAD_EPSABS / (10 * len(edges)), epsrel=1e-12, norm="max",
            limit=2000, full_output=True,
        )
        if not info.success:
            raise NumericalError(
                f"order-statistic quadrature did not converge on [{lo:.3g}, {hi:.3g}]", achieved=float(e)
            )
        total += val
        err += float(e)
    if err > QUAD_EPSABS:
        raise NumericalError("order-statistic quadrature above tolerance", achieved=err)
    return total


@dataclass(frozen=True)
class TwoPointSlowdown:
    """Straggler model: slowdown ``1/(mu q)`` with probability ``q``, else 0.

    Mean is ``1/mu``.  For ``q`` close to 1 the curve ``r * E[min of r]`` is
    not convex, which makes this a handy counterexample for the convexity
    check used by the profile optimizer.
    """

    mu: float = 1.0
    straggle_prob: float = 0.9

    def __post_init__(self) -> None:
        if not (self.mu > 0 and 0 < self.straggle_prob <= 1):
            raise ConfigurationError("two-point slowdown needs mu > 0 and 0 < q <= 1")

    @property
    def high(self) -> float:
        return 1.0 / (self.mu * self.straggle_prob)

    def sample(self, x: float, stream: RngStream) -> float:
        return self.high if stream.random() < self.straggle_prob else 0.0

    def order_stat_mean(self, i: int, r: int, x: float = 0.0) -> float:
        _check_order(i, r)
        # S_[i:r] is high iff at least r - i + 1 of the r draws straggle.
        q = self.straggle_prob
        return self.high * float(special.bdtrc(r - i, r, q)) if q < 1 else self.high

    def order_stat_table(self, x: float, r_max: int, i_max: int) -> np.ndarray:
        out = np.full((i_max + 1, r_max + 1), np.nan)
        for r in range(1, r_max + 1):
            for i in range(1, min(i_max, r) + 1):
                out[i, r] = self.order_stat_mean(i, r, x)
        return out


def order_stat_mean(model: SlowdownModel, i: int, r: int, x: float) -> float:
    """``E[S_[i:r] | X = x]`` for any slowdown model."""
    return model.order_stat_mean(i, r, x)


def sample_slowdown(model: SlowdownModel, x: float, rng: RngStream) -> float:
    if x < 0:
        raise DomainError("task size must be nonnegative")
    return model.sample(x, rng)
