"""Size-based replication profiles: the lower-bound program and its dual.

For every task size ``x`` on a finite grid we choose a distribution over the
number of replicas ``r >= k``.  The program minimizes the expected service
time

    sum_j w_j x_j sum_r p_jr (1 + E[S_[k:r] | x_j])

subject to the server-capacity constraint

    (lam/k) sum_j w_j x_j sum_r p_jr [r + (r-k) E[S_[k:r]|x_j] + sum_{i<=k} E[S_[i:r]|x_j]] <= slack.

The Lagrangian separates over grid points, so for a fixed multiplier ``y``
every row is minimized by a full scan over ``r``; ``y`` itself is found by
bisection on the capacity of those per-row minimizers.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InfeasibleError, NumericalError, RmaxTooSmall
from .model import SystemParams

TIE_EPS = 1e-9
GAP_TOL = 1e-6
CAPACITY_TOL = 1e-8
Y_BRACKET = (1e-6, 1e3)
Y_TOL = 1e-10


def default_r_max(k: int) -> int:
    return 10 * k + 50


# --------------------------------------------------------------------------
# Profiles
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ReplicationProfile:
    """Per-grid-point distributions over replica counts, stored sparsely."""

    k: int
    xs: tuple[float, ...]
    weights: tuple[float, ...]
    table: tuple[tuple[tuple[int, float], ...], ...]
    objective_value: float = math.nan
    capacity_usage: float = math.nan
    dual_y: float = math.nan
    dual_value: float = math.nan
    slack: float = 1.0
    r_max: int = 0
    lam: float = math.nan
    mu: float = math.nan
    notes: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        if len(self.xs) != len(self.table) or len(self.xs) != len(self.weights):
            raise ValueError("grid, weights and table lengths differ")
        for x, row in zip(self.xs, self.table):
            total = math.fsum(p for _, p in row)
            if abs(total - 1.0) > 1e-10:
                raise ValueError(f"row at x={x} sums to {total!r}")
            if any(r < self.k for r, _ in row):
                raise ValueError(f"row at x={x} uses fewer than k={self.k} replicas")

    @classmethod
    def from_rows(cls, k: int, xs, weights, rows, **meta) -> ReplicationProfile:
        """Build from dicts ``{r: probability}``; zero entries are dropped."""
        table = tuple(
            tuple(sorted((int(r), float(p)) for r, p in row.items() if p > 0.0)) for row in rows
        )
        return cls(k, tuple(float(x) for x in xs), tuple(float(w) for w in weights), table, **meta)

    @classmethod
    def constant(cls, k: int, xs, weights, r: int) -> ReplicationProfile:
        return cls.from_rows(k, xs, weights, [{r: 1.0} for _ in xs])

    def rows(self) -> list[dict[int, float]]:
        return [dict(row) for row in self.table]

    def column(self, r: int) -> np.ndarray:
        return np.array([dict(row).get(r, 0.0) for row in self.table])

    @property
    def support_max(self) -> int:
        return max(r for row in self.table for r, p in row if p > 0.0)

    @property
    def duality_gap(self) -> float:
        return self.objective_value - self.dual_value

    def expected_replicas(self) -> np.ndarray:
        return np.array([math.fsum(r * p for r, p in row) for row in self.table])

    def header(self) -> dict:
        return {
            "objective": self.objective_value,
            "capacity": self.capacity_usage,
            "dual_y": self.dual_y,
            "dual_value": self.dual_value,
            "duality_gap": self.duality_gap,
            "slack": self.slack,
            "R_max": self.r_max,
            "k": self.k,
            "lambda": self.lam,
            "mu": self.mu,
            "notes": list(self.notes),
        }

    def to_csv(self, meta: dict | None = None) -> str:
        buf = io.StringIO()
        for key, value in (meta or {}).items():
            buf.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["x", "weight", "r", "probability"])
        for x, w, row in zip(self.xs, self.weights, self.table):
            for r, p in row:
                writer.writerow([repr(x), repr(w), r, repr(p)])
        return buf.getvalue()

    def save(self, stem: str | Path, extra: dict | None = None) -> tuple[Path, Path]:
        """Write ``stem.csv`` and ``stem.json``; ``extra`` is merged into the JSON header."""
        stem = Path(stem)
        csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
        csv_path.write_text(self.to_csv(extra), newline="")
        head = self.header()
        if extra:
            head.update(extra)
        json_path.write_text(json.dumps(head, indent=2, sort_keys=True) + "\n")
        return csv_path, json_path

    @classmethod
    def load(cls, stem: str | Path) -> ReplicationProfile:
        stem = Path(stem)
        if stem.suffix in (".csv", ".json"):
            stem = stem.with_suffix("")
        head = json.loads(stem.with_suffix(".json").read_text())
        xs: list[float] = []
        weights: list[float] = []
        rows: list[dict[int, float]] = []
        with stem.with_suffix(".csv").open(newline="") as fh:
            lines = [line for line in fh if not line.startswith("#")]
            for rec in csv.DictReader(lines):
                x = float(rec["x"])
                if not xs or x != xs[-1]:
                    xs.append(x)
                    weights.append(float(rec["weight"]))
                    rows.append({})
                rows[-1][int(rec["r"])] = float(rec["probability"])
        return cls.from_rows(
            int(head["k"]), xs, weights, rows,
            objective_value=head["objective"], capacity_usage=head["capacity"],
            dual_y=head["dual_y"], dual_value=head["dual_value"], slack=head["slack"],
            r_max=int(head["R_max"]), lam=head["lambda"], mu=head["mu"], notes=tuple(head.get("notes", ())),
        )


# --------------------------------------------------------------------------
# Coefficient tables
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Coefficients:
    """Per-row objective ``a[j, r-k]`` and capacity ``b[j, r-k]`` coefficients, ``x w`` included."""

    k: int
    xs: np.ndarray
    weights: np.ndarray
    a: np.ndarray
    b: np.ndarray

    @property
    def r_values(self) -> np.ndarray:
        return np.arange(self.k, self.k + self.a.shape[1])

    @property
    def r_max(self) -> int:
        return self.k + self.a.shape[1] - 1


def unit_terms(model, x: float, k: int, lam: float, r_max: int) -> tuple[np.ndarray, np.ndarray]:
    """``1 + E[S_[k:r]|x]`` and ``(lam/k)(r + (r-k) E[S_[k:r]|x] + sum_i E[S_[i:r]|x])`` for ``r = k..r_max``."""
    tab = model.order_stat_table(float(x), r_max, k)
    rs = np.arange(k, r_max + 1)
    ek = tab[k, k:]
    esum = np.nansum(tab[1 : k + 1, k:], axis=0)
    return 1.0 + ek, (lam / k) * (rs + (rs - k) * ek + esum)


def coefficients(params: SystemParams, model, xs, weights, r_max: int) -> Coefficients:
    xs = np.asarray(xs, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if abs(weights.sum() - 1.0) > 1e-12:
        raise ValueError(f"grid weights sum to {weights.sum()!r}, not 1")
    if r_max < params.k:
        raise ValueError(f"R_max={r_max} < k={params.k}")
    a_rows, b_rows = [], []
    for x, w in zip(xs, weights):
        a, b = unit_terms(model, x, params.k, params.lam, r_max)
        a_rows.append(w * x * a)
        b_rows.append(w * x * b)
    return Coefficients(params.k, xs, weights, np.array(a_rows), np.array(b_rows))


def _tie_pick(h: np.ndarray, largest: bool) -> np.ndarray:
    """Column index per row among entries within ``TIE_EPS`` of the row minimum."""
    near = h <= h.min(axis=1, keepdims=True) + TIE_EPS
    if largest:
        return h.shape[1] - 1 - np.argmax(near[:, ::-1], axis=1)
    return np.argmax(near, axis=1)


def lagrangian_choice(coef: Coefficients, y: float, largest: bool) -> np.ndarray:
    # Compare per unit of x w so ties are judged on the integrand scale.
    scale = (coef.xs * coef.weights)[:, None]
    h = (coef.a + y * coef.b) / np.where(scale > 0, scale, 1.0)
    return _tie_pick(h, largest)


def choice_capacity(coef: Coefficients, idx: np.ndarray) -> float:
    return float(coef.b[np.arange(len(idx)), idx].sum())


def choice_objective(coef: Coefficients, idx: np.ndarray) -> float:
    return float(coef.a[np.arange(len(idx)), idx].sum())


def dual_value(coef: Coefficients, y: float, slack: float) -> float:
    """``sum_j min_r (a + y b) - y slack``, a lower bound on the program's optimum for any ``y >= 0``."""
    return float((coef.a + y * coef.b).min(axis=1).sum() - y * slack)


# --------------------------------------------------------------------------
# Public per-symbol operations
# --------------------------------------------------------------------------


def objective(profile: ReplicationProfile, model) -> float:
    """Expected service time ``sum_j w_j x_j sum_r p_jr (1 + E[S_[k:r]|x_j])``."""
    k = profile.k
    return math.fsum(
        w * x * p * (1.0 + model.order_stat_mean(k, r, x))
        for x, w, row in zip(profile.xs, profile.weights, profile.table)
        for r, p in row
    )


def capacity(profile: ReplicationProfile, model, params: SystemParams) -> float:
    """Left-hand side of the capacity constraint."""
    k = profile.k
    total = []
    for x, w, row in zip(profile.xs, profile.weights, profile.table):
        for r, p in row:
            e = [model.order_stat_mean(i, r, x) for i in range(1, k + 1)]
            total.append(w * x * p * (r + (r - k) * e[-1] + math.fsum(e)))
    return params.lam / k * math.fsum(total)


def dual_integrand(x: float, y: float, r: int, model, params: SystemParams, slack: float = 1.0) -> float:
    """Integrand of the dual function at ``(x, y, r)``, without the outer ``x`` weight.

    ``1 - y slack + y lam r/k + E_k (1 + y lam (r-k)/k) + (y lam/k) sum_i E_i``; for ``k = 1``
    and unit slack it reduces to ``(1 + E[S_[1:r]|x]) (1 + y lam r) - y``.
    """
    k = params.k
    if r < k:
        raise ValueError(f"r={r} < k={k}")
    e = [model.order_stat_mean(i, r, x) for i in range(1, k + 1)]
    c = y * params.lam / k
    return 1.0 - y * slack + c * r + e[-1] * (1.0 + c * (r - k)) + c * math.fsum(e)


def argmin_r(x: float, y: float, model, params: SystemParams, r_max: int | None = None) -> list[int]:
    """Every ``r`` in ``[k, r_max]`` whose Lagrangian is within ``TIE_EPS`` of the minimum."""
    k = params.k
    r_max = default_r_max(k) if r_max is None else r_max
    a, b = unit_terms(model, x, k, params.lam, r_max)
    h = a + y * b
    rs = np.flatnonzero(h <= h.min() + TIE_EPS) + k
    if r_max > k and rs[-1] == r_max:
        raise RmaxTooSmall(f"argmin at x={x}, y={y} reaches R_max={r_max}", achieved=float(h.min()))
    return [int(r) for r in rs]


# --------------------------------------------------------------------------
# Convexity check
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvexityReport:
    ok: bool
    min_second_difference: float
    violations: tuple[tuple[float, int, float], ...]

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "min_second_difference": self.min_second_difference,
            "violations": [list(v) for v in self.violations],
        }


def check_assumption_convexity(model, xs, r_range=(1, 20), tol: float = 1e-9) -> ConvexityReport:
    """Second differences of ``g(r) = r E[S_[1:r] | x]`` over ``r`` in ``r_range`` (inclusive)."""
    lo, hi = r_range
    worst = math.inf
    bad: list[tuple[float, int, float]] = []
    for x in xs:
        tab = model.order_stat_table(float(x), hi, 1)
        g = {r: r * tab[1, r] for r in range(lo, hi + 1)}
        for r in range(lo + 1, hi):
            d2 = g[r - 1] + g[r + 1] - 2.0 * g[r]
            worst = min(worst, d2)
            if d2 < -tol:
                bad.append((float(x), r, float(d2)))
    return ConvexityReport(not bad, worst, tuple(bad))


# --------------------------------------------------------------------------
# Solver
# --------------------------------------------------------------------------


def _solve_fixed(coef: Coefficients, slack: float, bracket: tuple[float, float], y_tol: float):
    target = slack + 1e-12
    y_lo, y_hi = bracket
    if not 0 < y_lo < y_hi:
        raise ValueError(f"bad y bracket {bracket}")

    def cap(y: float, largest: bool) -> float:
        return choice_capacity(coef, lagrangian_choice(coef, y, largest))

    expansions = 0
    while cap(y_hi, False) > target:
        y_hi *= 10.0
        expansions += 1
        if expansions > 12:
            raise NumericalError(f"y bracket exhausted: capacity still above target at y={y_hi:.3g}", y_hi)
    shrinks = 0
    while cap(y_lo, False) <= target:
        # Constraint not active down to y_lo: shrink toward 0.
        if shrinks > 12:
            idx = lagrangian_choice(coef, y_lo, False)
            return y_lo, y_lo, idx, idx
        y_lo /= 10.0
        shrinks += 1
    while y_hi - y_lo > y_tol * max(1.0, y_hi):
        mid = 0.5 * (y_lo + y_hi)
        if cap(mid, False) <= target:
            y_hi = mid
        else:
            y_lo = mid
    return y_lo, y_hi, lagrangian_choice(coef, y_lo, True), lagrangian_choice(coef, y_hi, False)


def solve(
    params: SystemParams,
    model,
    xs,
    weights,
    slack: float = 1.0,
    r_max: int | None = None,
    y_bracket: tuple[float, float] = Y_BRACKET,
    y_tol: float = Y_TOL,
    escalate: bool = True,
) -> ReplicationProfile:
    """Optimal replication profile on the grid ``(xs, weights)`` at capacity ``slack``.

    Raises :class:`InfeasibleError` when even ``r = k`` everywhere exceeds the
    capacity, :class:`RmaxTooSmall` when the cap on ``r`` stays binding after
    escalation, and :class:`NumericalError` when the duality gap exceeds
    ``GAP_TOL``.
    """
    k = params.k
    if not slack > 0:
        raise InfeasibleError(f"capacity slack must be positive, got {slack}")
    r_max = default_r_max(k) if r_max is None else int(r_max)
    cap_limit = (2**10) * k
    notes: list[str] = []
    while True:
        coef = coefficients(params, model, xs, weights, r_max)
        floor_cap = float(coef.b.min(axis=1).sum())
        if floor_cap > slack + CAPACITY_TOL:
            eff = params.lam / slack
            raise InfeasibleError(
                f"infeasible: minimum capacity {floor_cap:.6g} exceeds slack {slack:.6g} "
                f"(needs lambda/slack = {eff:.6g} <= 1/(1+1/mu) = {1 / (1 + 1 / params.mu):.6g})"
            )
        y_lo, y_hi, idx_lo, idx_hi = _solve_fixed(coef, slack, y_bracket, y_tol)
        top = coef.a.shape[1] - 1
        if r_max > k and (idx_lo == top).any():
            if not escalate or 2 * r_max > cap_limit:
                raise RmaxTooSmall(f"replica-count minimizer stays at R_max={r_max}", achieved=float(r_max))
            notes.append(f"R_max escalated from {r_max} to {2 * r_max}")
            r_max *= 2
            continue
        break

    rows_idx = np.arange(len(coef.xs))
    cap_lo = choice_capacity(coef, idx_lo)
    cap_hi = choice_capacity(coef, idx_hi)
    diff = idx_lo != idx_hi
    if diff.any() and cap_lo > cap_hi:
        theta = min(max((slack - cap_hi) / (cap_lo - cap_hi), 0.0), 1.0)
    else:
        theta = 0.0
    rows: list[dict[int, float]] = []
    for j in rows_idx:
        lo_r, hi_r = int(idx_lo[j]) + k, int(idx_hi[j]) + k
        if lo_r == hi_r or theta == 0.0:
            rows.append({hi_r: 1.0})
        elif theta == 1.0:
            rows.append({lo_r: 1.0})
        else:
            rows.append({lo_r: theta, hi_r: 1.0 - theta})
    a_used = (1.0 - theta) * coef.a[rows_idx, idx_hi] + theta * coef.a[rows_idx, idx_lo]
    b_used = (1.0 - theta) * coef.b[rows_idx, idx_hi] + theta * coef.b[rows_idx, idx_lo]
    primal = float(math.fsum(a_used))
    cap_used = float(math.fsum(b_used))
    if cap_used > slack + CAPACITY_TOL:
        raise NumericalError(f"recovered profile uses capacity {cap_used!r} > {slack!r}", cap_used - slack)
    if cap_used < slack - CAPACITY_TOL:
        notes.append(f"capacity not tight: {cap_used:.12g} < {slack:.12g}")
    dual = max(dual_value(coef, y_lo, slack), dual_value(coef, y_hi, slack))
    gap = primal - dual
    if abs(gap) > GAP_TOL:
        raise NumericalError(f"duality gap {gap:.3g} exceeds {GAP_TOL}", achieved=abs(gap))
    for j, row in enumerate(rows):
        rs = sorted(row)
        if len(rs) > 2 or (len(rs) == 2 and rs[1] - rs[0] != 1):
            notes.append(f"row x={coef.xs[j]:.6g} mixes non-consecutive counts {rs}")
    if k == 1:
        report = check_assumption_convexity(model, coef.xs, (1, min(r_max, 20)))
        if not report.ok:
            msg = "r E[min] is not convex on this grid; the two-consecutive-count structure is not guaranteed"
            warnings.warn(msg, stacklevel=2)
            notes.append(msg)
    return ReplicationProfile.from_rows(
        k, coef.xs, coef.weights, rows,
        objective_value=primal, capacity_usage=cap_used, dual_y=0.5 * (y_lo + y_hi),
        dual_value=dual, slack=slack, r_max=r_max, lam=params.lam, mu=model.mu, notes=tuple(notes),
    )


def perturbed_slack(n: int, exponent: float) -> float:
    """Right-hand side ``1 - n^(exponent-1)`` used when sizing the size-based policies."""
    return 1.0 - n ** (exponent - 1.0)


def solve_lp(params: SystemParams, model, xs, weights, slack: float = 1.0, r_max: int = 12):
    """Reference solution of the same program over ``r <= r_max`` by a generic LP solver.

    Returns ``(objective, probabilities)`` with probabilities shaped ``(m, r_max - k + 1)``.
    """
    from scipy.optimize import linprog

    coef = coefficients(params, model, xs, weights, r_max)
    m, width = coef.a.shape
    eq = np.zeros((m, m * width))
    for j in range(m):
        eq[j, j * width : (j + 1) * width] = 1.0
    res = linprog(
        coef.a.ravel(),
        A_ub=coef.b.ravel()[None, :],
        b_ub=[slack],
        A_eq=eq,
        b_eq=np.ones(m),
        bounds=(0, None),
        method="highs",
    )
    if res.status == 2:
        raise InfeasibleError("LP infeasible")
    if not res.success:
        raise NumericalError(f"LP failed: {res.message}")
    return float(res.fun), res.x.reshape(m, width)
