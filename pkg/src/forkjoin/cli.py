"""Command-line entry point: ``forkjoin {simulate,bound,optimize,sweep,validate}``.

Exit codes: 0 success, 1 configuration or input error (also a failed
``validate``), 2 instability.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import functools
import hashlib
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .analytics import bound_report, summarize
from .config import ExperimentConfig, load
from .engine import run_simulation
from .errors import (
    ConfigurationError,
    DomainError,
    ForkJoinError,
    InfeasibleError,
    InsufficientData,
)
from .model import ExponentialSlowdown, RngStream, is_stabilizable
from .optimizer import (
    ReplicationProfile,
    check_assumption_convexity,
    default_r_max,
    solve,
    solve_lp,
)
from .policies import build_policy

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_UNSTABLE = 2

JOB_COLUMNS = (
    "job_id", "arrival_time", "task_size", "subsystem", "replicas_started",
    "delay", "service_time", "queueing_time",
)

log = logging.getLogger("forkjoin")


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------


def provenance(cfg: ExperimentConfig, seed: int | None = None) -> dict:
    out = {"version": __version__, "config": cfg.to_dict()}
    if seed is not None:
        out["seed"] = seed
    return out


def write_csv(path: Path, header, rows, meta: dict) -> None:
    """CSV with ``#`` provenance lines, a header row, ``.`` decimals and LF endings."""
    buf = io.StringIO()
    for key, value in meta.items():
        buf.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue(), newline="")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def resolve_profile(cfg: ExperimentConfig, model) -> ReplicationProfile:
    if cfg.policy.profile_path:
        try:
            return ReplicationProfile.load(cfg.policy.profile_path)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigurationError(f"[policy] profile_path: cannot load profile: {exc}") from exc
    xs, ws = cfg.optimizer_grid()
    r_max = cfg.optimize.r_max or cfg.policy.r_max
    return solve(cfg.params(), model, xs, ws, slack=cfg.slack(), r_max=r_max, y_bracket=cfg.optimize.y_bracket)


def build_from_config(cfg: ExperimentConfig):
    params = cfg.params()
    model = cfg.slowdown_model()
    profile = None
    if cfg.policy.name in ("sb_frec", "sb_dq"):
        profile = resolve_profile(cfg, model)
        if cfg.policy.r_max is not None and profile.support_max > cfg.policy.r_max:
            raise ConfigurationError(
                f"[policy] r_max: profile uses r={profile.support_max} > r_max={cfg.policy.r_max}"
            )
    policy = build_policy(cfg.policy.name, params, profile, model, cfg.policy.literal)
    return params, cfg.task_sizes(), model, policy


def run_one(cfg: ExperimentConfig, seed: int):
    params, sizes, model, policy = build_from_config(cfg)
    m = cfg.sim
    return run_simulation(
        params, sizes, model, policy, horizon=m.horizon, warmup=m.warmup, seed=seed,
        drain_margin=m.drain_margin, explosion_factor=m.explosion_factor, batches=m.batches,
    )


def _run_task(args):
    cfg, seed = args
    try:
        res = run_one(cfg, seed)
    except ForkJoinError as exc:
        return seed, None, f"{type(exc).__name__}: {exc}"
    res.trace = None
    return seed, res, None


def fan_out(tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [_run_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_task, tasks))


def _out_dir(cfg: ExperimentConfig, override: str | None) -> Path:
    out = Path(override or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _bounds_or_none(params) -> dict | None:
    try:
        return bound_report(params).to_dict()
    except DomainError:
        return None


def _summary_dict(res, batches: int) -> dict:
    base = {
        "jobs": len(res.jobs),
        "arrived": res.arrived,
        "departed": res.departed,
        "censored": res.censored,
        "live_at_end": res.live,
        "events": res.event_count,
        "wall_seconds": res.wall_seconds,
        "busy_servers_time_average": res.busy_time_average,
        "aborted": res.aborted,
        "abort_reason": res.abort_reason,
        "policy_stats": res.policy_stats,
    }
    try:
        base.update(summarize(res, batches).to_dict())
    except InsufficientData as exc:
        base["summary_error"] = str(exc)
        base["little_residual"] = res.little_residual()
    return base


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg, args.out)
    base_seed = cfg.sim.seed
    tasks = [(cfg, base_seed + rep) for rep in range(cfg.sim.replications)]
    results = fan_out(tasks, args.jobs)
    params, _, _, policy = build_from_config(cfg)
    summary = {
        **provenance(cfg, base_seed),
        "policy": policy.describe(),
        "bounds": _bounds_or_none(params),
        "replications": [],
    }
    fmt = args.format or "csv"
    status = EXIT_OK
    for rep, (seed, res, err) in enumerate(results):
        if err is not None:
            print(f"replication {rep} (seed {seed}): {err}", file=sys.stderr)
            return EXIT_CONFIG
        j = res.jobs
        rows = [
            (int(a), _fmt(b), _fmt(c), int(d), int(e), _fmt(f), _fmt(g), _fmt(f - g))
            for a, b, c, d, e, f, g in zip(j.job_id, j.arrival, j.size, j.subsystem, j.replicas, j.delay, j.service)
        ]
        if fmt == "csv":
            write_csv(out / f"jobs_{rep}.csv", JOB_COLUMNS, rows, provenance(cfg, seed))
        else:
            doc = {**provenance(cfg, seed), "columns": list(JOB_COLUMNS), "rows": [list(r) for r in rows]}
            (out / f"jobs_{rep}.json").write_text(json.dumps(doc) + "\n")
        entry = {"replication": rep, "seed": seed, **_summary_dict(res, cfg.sim.batches)}
        summary["replications"].append(entry)
        if res.aborted:
            print(f"replication {rep} (seed {seed}): {res.abort_reason}", file=sys.stderr)
            status = EXIT_UNSTABLE
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    for entry in summary["replications"]:
        if "delay" in entry:
            print(
                f"rep {entry['replication']}: E[W]={entry['delay']['mean']:.6g} "
                f"E[Ws]={entry['service_time']['mean']:.6g} E[Wq]={entry['queueing_time']['mean']:.6g} "
                f"P(Wq>0)={entry['prob_wait']['mean']:.4g} jobs={entry['jobs']}"
            )
    return status


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def cmd_bound(cfg: ExperimentConfig, args) -> int:
    params = cfg.params()
    if not is_stabilizable(params):
        threshold = 1.0 / (1.0 + 1.0 / params.mu)
        err = {
            "error": "no stable admissible policy: lambda must be below 1/(1+1/mu)",
            "lambda": params.lam,
            "threshold": threshold,
            "r_star": params.r_star,
        }
        print(json.dumps(err, sort_keys=True))
        return EXIT_UNSTABLE
    try:
        report = bound_report(params).to_dict()
    except DomainError as exc:
        print(json.dumps({"error": str(exc)}))
        return EXIT_CONFIG
    if (args.format or "json") == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(report))
        w.writerow([_fmt(v) if v is not None else "" for v in report.values()])
        sys.stdout.write(buf.getvalue())
    else:
        print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_optimize(cfg: ExperimentConfig, args) -> int:
    model = cfg.slowdown_model()
    xs, ws = cfg.optimizer_grid()
    r_max = cfg.optimize.r_max or default_r_max(cfg.system.k)
    try:
        profile = solve(cfg.params(), model, xs, ws, slack=cfg.slack(), r_max=r_max, y_bracket=cfg.optimize.y_bracket)
    except InfeasibleError as exc:
        print(f"optimize: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = _out_dir(cfg, args.out)
    prov = provenance(cfg)
    profile.save(out / "profile", extra=prov)
    print(json.dumps(profile.header(), indent=2, default=_json_default))
    return EXIT_OK


SWEEP_COLUMNS = (
    "param", "value", "replication", "seed", "jobs", "mean_delay", "mean_service", "mean_queueing",
    "prob_wait", "finite_n_prediction", "asymptote", "lower_bound", "error",
)


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    param = args.param or cfg.sweep.param
    values = args.values if args.values is not None else list(cfg.sweep.values)
    if not values:
        print("sweep: empty list of sweep values", file=sys.stderr)
        return EXIT_CONFIG
    points = []
    tasks = []
    for v in values:
        try:
            if param == "n":
                if v != int(v):
                    raise ConfigurationError(f"n must be an integer, got {v}")
                point = cfg.replace("system", n=int(v))
            elif param == "lambda":
                point = cfg.replace("system", lam=float(v))
            else:
                raise ConfigurationError(f"unknown sweep parameter {param!r}")
        except ConfigurationError as exc:
            points.append((v, None, str(exc)))
            continue
        points.append((v, point, None))
    for v, point, err in points:
        if point is None:
            continue
        for rep in range(cfg.sim.replications):
            tasks.append((point, cfg.sim.seed + rep))
    results = iter(fan_out(tasks, args.jobs))
    rows = []
    for v, point, err in points:
        if point is None:
            rows.append((param, _fmt(v), "", "", 0, "", "", "", "", "", "", "", err))
            continue
        bounds = _bounds_or_none(point.params())
        for rep in range(cfg.sim.replications):
            seed, res, run_err = next(results)
            pred = asym = lower = ""
            if bounds is not None:
                pred = _fmt(bounds["finite_n_prediction"])
                asym = _fmt(bounds["policy_asymptote"])
                lower = _fmt(bounds["lower_bound_delay"])
            if run_err is not None:
                rows.append((param, _fmt(v), rep, seed, 0, "", "", "", "", pred, asym, lower, run_err))
                continue
            error = res.abort_reason if res.aborted else ""
            n_jobs = len(res.jobs)
            stats = (
                (_fmt(res.mean_delay), _fmt(res.mean_service), _fmt(res.mean_queueing), _fmt(res.prob_wait))
                if n_jobs else ("", "", "", "")
            )
            rows.append((param, _fmt(v), rep, seed, n_jobs, *stats, pred, asym, lower, error))
    out = _out_dir(cfg, args.out)
    if (args.format or "csv") == "csv":
        write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows, provenance(cfg, cfg.sim.seed))
    else:
        doc = {**provenance(cfg, cfg.sim.seed), "rows": [dict(zip(SWEEP_COLUMNS, r)) for r in rows]}
        (out / "sweep.json").write_text(json.dumps(doc, indent=2) + "\n")
    for r in rows:
        print("\t".join(str(x) for x in r))
    return EXIT_OK


# --------------------------------------------------------------------------
# validate
# --------------------------------------------------------------------------


def _check_order_stats(cfg: ExperimentConfig) -> tuple[bool, str]:
    model = cfg.slowdown_model()
    stream = RngStream(cfg.sim.seed, 99)
    draws = 200_000
    worst = 0.0
    for i, r, x in ((1, 2, 1.0), (2, 3, 0.5), (1, 3, 2.0)):
        s = np.array([[model.sample(x, stream) for _ in range(r)] for _ in range(draws // r)])
        vals = np.sort(s, axis=1)[:, i - 1]
        se = vals.std(ddof=1) / math.sqrt(len(vals))
        z = abs(vals.mean() - model.order_stat_mean(i, r, x)) / se if se > 0 else 0.0
        worst = max(worst, z)
    return worst < 4.0, f"max |z| = {worst:.2f}"


def _check_order_sum(cfg: ExperimentConfig) -> tuple[bool, str]:
    model = cfg.slowdown_model()
    worst = 0.0
    for x in (0.1, 1.0, 5.0):
        for r in (1, 2, 5):
            tot = sum(model.order_stat_mean(i, r, x) for i in range(1, r + 1)) / r
            worst = max(worst, abs(tot - 1.0 / model.mu))
    return worst < 1e-6, f"max deviation {worst:.2e}"


def _check_convexity(cfg: ExperimentConfig) -> tuple[bool, str]:
    xs, _ = cfg.optimizer_grid()
    rep = check_assumption_convexity(cfg.slowdown_model(), xs[:: max(1, len(xs) // 8)])
    return rep.ok, f"min second difference {rep.min_second_difference:.3g}, {len(rep.violations)} violations"


@functools.lru_cache(maxsize=4)
def _short_run(cfg: ExperimentConfig, seed: int, fresh: int = 0):
    params = cfg.params()
    # About 10^5 jobs: enough for Little's law to hold to well under 1% at moderate load.
    horizon = min(max(1e5 / params.job_rate, 50.0), 2e4)
    short = dataclasses.replace(cfg.sim, horizon=horizon, warmup=None, replications=1)
    small = dataclasses.replace(cfg, sim=short)
    return run_one(small, seed) if is_stabilizable(params) else None


def _check_little(cfg: ExperimentConfig) -> tuple[bool, str]:
    res = _short_run(cfg, cfg.sim.seed)
    if res is None:
        return True, "skipped: parameters are not stabilizable"
    if res.aborted:
        return False, res.abort_reason
    resid = res.little_residual()
    return resid < 0.01, f"residual {resid:.2e} over {len(res.jobs)} jobs"


def _check_accounting(cfg: ExperimentConfig) -> tuple[bool, str]:
    res = _short_run(cfg, cfg.sim.seed)
    if res is None:
        return True, "skipped: parameters are not stabilizable"
    j = res.jobs
    ok = bool(np.all(j.queueing >= -1e-12)) and bool(np.all(j.service <= j.delay))
    return ok, f"{len(j)} jobs, min W^q {float(j.queueing.min()) if len(j) else 0.0:.3g}"


def _digest(res) -> str:
    h = hashlib.sha256()
    for arr in (res.jobs.arrival, res.jobs.delay, res.jobs.service, res.jobs.replicas):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _check_replay(cfg: ExperimentConfig) -> tuple[bool, str]:
    a = _short_run(cfg, cfg.sim.seed)
    if a is None:
        return True, "skipped: parameters are not stabilizable"
    b = _short_run(cfg, cfg.sim.seed, fresh=1)
    return _digest(a) == _digest(b), _digest(a)[:16]


def _check_duality(cfg: ExperimentConfig) -> tuple[bool, str]:
    from .model import SystemParams

    lam = min(cfg.system.lam, 0.4)
    params = SystemParams(n=max(cfg.system.n, 1), k=1, lam=lam, mu=cfg.system.mu, alpha=cfg.system.alpha)
    if not is_stabilizable(params):
        return True, "skipped: parameters are not stabilizable"
    model = ExponentialSlowdown(params.mu)
    prof = solve(params, model, [0.5, 1.5], [0.5, 0.5])
    lp, _ = solve_lp(params, model, [0.5, 1.5], [0.5, 0.5], r_max=prof.r_max)
    gap = abs(prof.duality_gap)
    diff = abs(prof.objective_value - lp)
    return gap <= 1e-6 and diff <= 1e-6, f"duality gap {gap:.2e}, LP difference {diff:.2e}"


VALIDATIONS = (
    ("order-statistic Monte Carlo agreement", _check_order_stats),
    ("order statistics average to the mean", _check_order_sum),
    ("convexity of r E[min]", _check_convexity),
    ("Little's law on a short run", _check_little),
    ("delay = service + queueing", _check_accounting),
    ("seed replay is bit-identical", _check_replay),
    ("duality gap on a small instance", _check_duality),
)


def cmd_validate(cfg: ExperimentConfig, args) -> int:
    failed = 0
    for name, check in VALIDATIONS:
        try:
            ok, detail = check(cfg)
        except ForkJoinError as exc:
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return EXIT_CONFIG if failed else EXIT_OK


# --------------------------------------------------------------------------
# main
# --------------------------------------------------------------------------

COMMANDS = {
    "simulate": cmd_simulate,
    "bound": cmd_bound,
    "optimize": cmd_optimize,
    "sweep": cmd_sweep,
    "validate": cmd_validate,
}


def _values(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="forkjoin",
        description="Fork-join redundancy simulator, bounds and replication-profile optimizer.",
        epilog="exit codes: 0 success, 1 configuration or input error, 2 instability",
    )
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI experiment file")
        p.add_argument("--seed", type=int, help="override [sim] seed")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("--out", help="output directory (overrides [output] dir)")
        p.add_argument("--format", choices=("csv", "json"))
        if name == "sweep":
            p.add_argument("--param", choices=("n", "lambda"))
            p.add_argument("--values", type=_values, help="comma-separated sweep values")
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load(args.config)
        if args.seed is not None:
            cfg = cfg.replace("sim", seed=args.seed)
        return COMMANDS[args.command](cfg, args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
