"""Closed-form delay bounds and asymptotes, plus steady-state output analysis."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .errors import DomainError, InsufficientData
from .model import SystemParams, batch_sizes, is_stabilizable, p_k, r_star

DEFAULT_BATCHES = 32


def _require_budget(params: SystemParams) -> float:
    rs = r_star(params)
    if rs <= 1.0:
        threshold = 1.0 / (1.0 + 1.0 / params.mu)
        raise DomainError(
            f"r* = {rs:.6g} <= 1 (lambda={params.lam} >= {threshold:.6g}): no stable admissible policy"
        )
    return rs


def delay_lower_bound(params: SystemParams) -> float:
    """Universal lower bound ``1 + (1/mu) sum_{i=1..k} 1/(k r* - i + 1)``."""
    rs = _require_budget(params)
    k = params.k
    return 1.0 + math.fsum(1.0 / (k * rs - i + 1) for i in range(1, k + 1)) / params.mu


def delay_lower_bound_asymptotic(params: SystemParams) -> float:
    """Limit of :func:`delay_lower_bound` as ``k -> infinity``."""
    rs = _require_budget(params)
    return 1.0 + math.log(rs / (rs - 1.0)) / params.mu


def _mixture_weight(params: SystemParams, finite_n: bool) -> float:
    return params.routing_probability() if finite_n else p_k(params)


def frec_asymptotic_service(params: SystemParams, finite_n: bool = False) -> float:
    """Limiting mean service time of FREC for ``k = 1``.

    With ``finite_n`` the mixing weight ``p_1`` is replaced by the routing
    probability ``(p_1 - 2 n^(alpha-1))^+`` actually used at this ``n``.
    """
    if params.k != 1:
        raise DomainError("the FREC service-time formula covers k = 1 only")
    _require_budget(params)
    big, small = batch_sizes(params)
    if small < 1:
        raise DomainError("ceil(r*) = 1: the second subsystem would have no replicas")
    w = _mixture_weight(params, finite_n)
    return 1.0 + w / (params.mu * big) + (1.0 - w) / (params.mu * small)


def dq_asymptotic_service(params: SystemParams, finite_n: bool = False, k_limit: bool = False) -> float:
    """Limiting mean service time of DQ at fixed ``k`` (or the ``k -> infinity`` value)."""
    if k_limit:
        return delay_lower_bound_asymptotic(params)
    _require_budget(params)
    k = params.k
    big, small = batch_sizes(params)
    if small < k:
        raise DomainError(f"ceil(r* k) = k = {k}: the second subsystem would have fewer than k replicas")
    w = _mixture_weight(params, finite_n)
    acc = math.fsum(w / (big - i + 1) + (1.0 - w) / (big - i) for i in range(1, k + 1))
    return 1.0 + acc / params.mu


def block_service_mean(replicas: int, k: int, mu: float) -> float:
    """Mean service time ``1 + E[S_[k:R]]`` of a unit job whose ``R`` replicas start together."""
    return 1.0 + math.fsum(1.0 / (replicas - j) for j in range(k)) / mu


@dataclass(frozen=True)
class BoundReport:
    lambda_: float
    mu: float
    k: int
    r_star: float
    lower_bound_delay: float
    asymptotic_limit: float
    policy_asymptote: float
    frec_asymptote: float | None
    dq_asymptote: float
    finite_n_prediction: float | None
    gap: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d


def bound_report(params: SystemParams, finite_n: bool = True) -> BoundReport:
    """Evaluate every closed form at ``params``; the policy asymptote is DQ's (FREC's when ``k = 1``)."""
    if not is_stabilizable(params):
        _require_budget(params)
    lower = delay_lower_bound(params)
    frec = frec_asymptotic_service(params) if params.k == 1 else None
    dq = dq_asymptotic_service(params)
    policy = frec if frec is not None else dq
    if finite_n:
        prediction = (
            frec_asymptotic_service(params, finite_n=True)
            if params.k == 1
            else dq_asymptotic_service(params, finite_n=True)
        )
    else:
        prediction = None
    return BoundReport(
        lambda_=params.lam,
        mu=params.mu,
        k=params.k,
        r_star=r_star(params),
        lower_bound_delay=lower,
        asymptotic_limit=delay_lower_bound_asymptotic(params),
        policy_asymptote=policy,
        frec_asymptote=frec,
        dq_asymptote=dq,
        finite_n_prediction=prediction,
        gap=policy - lower,
    )


# --------------------------------------------------------------------------
# Output analysis
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Estimate:
    mean: float
    lo: float
    hi: float

    @property
    def half_width(self) -> float:
        return 0.5 * (self.hi - self.lo)

    def covers(self, value: float) -> bool:
        return self.lo <= value <= self.hi

    def to_dict(self) -> dict:
        return {"mean": self.mean, "ci_low": self.lo, "ci_high": self.hi}


def batch_means(samples, batches: int = DEFAULT_BATCHES, level: float = 0.95) -> Estimate:
    """Non-overlapping batch-means confidence interval.

    ``samples`` must be in output order (arrival order for jobs).  Trailing
    observations that do not fill the last batch are dropped from the
    interval but kept in the point estimate.
    """
    x = np.asarray(samples, dtype=float)
    if batches < 2:
        raise ValueError("need at least two batches")
    if x.size < batches:
        raise InsufficientData(f"{x.size} observations for {batches} batches", x.size)
    size = x.size // batches
    means = x[: size * batches].reshape(batches, size).mean(axis=1)
    point = float(x.mean())
    spread = float(means.std(ddof=1))
    if spread == 0.0:
        return Estimate(point, point, point)
    half = float(stats.t.ppf(0.5 + level / 2.0, batches - 1)) * spread / math.sqrt(batches)
    return Estimate(point, point - half, point + half)


@dataclass(frozen=True)
class RunSummary:
    jobs: int
    delay: Estimate
    service: Estimate
    queueing: Estimate
    prob_wait: Estimate
    replicas: float
    little_residual: float
    accounting_residual: float

    def to_dict(self) -> dict:
        return {
            "jobs": self.jobs,
            "delay": self.delay.to_dict(),
            "service_time": self.service.to_dict(),
            "queueing_time": self.queueing.to_dict(),
            "prob_wait": self.prob_wait.to_dict(),
            "mean_replicas_started": self.replicas,
            "little_residual": self.little_residual,
            "accounting_residual": self.accounting_residual,
        }


WAIT_EPS = 1e-9


def summarize(run, batches: int = DEFAULT_BATCHES) -> RunSummary:
    """Batch-means estimates for a finished simulation run.

    ``run`` is a :class:`forkjoin.engine.SimulationResult`; only its per-job
    arrays and window statistics are used.
    """
    jobs = run.jobs
    count = len(jobs.delay)
    if count < 2 * batches:
        raise InsufficientData(f"only {count} post-warmup jobs; need at least {2 * batches}", count)
    delay, service, queueing = jobs.delay, jobs.service, jobs.queueing
    return RunSummary(
        jobs=count,
        delay=batch_means(delay, batches),
        service=batch_means(service, batches),
        queueing=batch_means(queueing, batches),
        prob_wait=batch_means((queueing > WAIT_EPS).astype(float), batches),
        replicas=float(jobs.replicas.mean()),
        little_residual=run.little_residual(),
        accounting_residual=float(abs(delay.mean() - service.mean() - queueing.mean())),
    )


def drift_test(times, values, batches: int = DEFAULT_BATCHES) -> tuple[float, float]:
    """Slope of ``values`` against ``times`` fitted on batch means, and its t statistic.

    Batching tames the autocorrelation of queue-length paths enough for a
    rough "is there a trend" decision.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.size < 2 * batches:
        raise InsufficientData(f"{t.size} samples for a {batches}-batch drift test", t.size)
    size = t.size // batches
    tb = t[: size * batches].reshape(batches, size).mean(axis=1)
    vb = v[: size * batches].reshape(batches, size).mean(axis=1)
    fit = stats.linregress(tb, vb)
    tstat = fit.slope / fit.stderr if fit.stderr > 0 else (0.0 if fit.slope == 0 else math.inf)
    return float(fit.slope), float(tstat)
