"""Experiment configuration: a sectioned INI file with a typed schema.

Every key has a declared type; unknown sections or keys are errors, and
``parse(render(cfg)) == cfg`` for every valid config.  Floats are written
with ``repr`` so the round trip is exact.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigurationError
from .model import (
    Deterministic,
    DiscreteGrid,
    ExponentialSize,
    ExponentialSlowdown,
    GammaSlowdown,
    ParetoSize,
    SystemParams,
    TwoPointSlowdown,
)
from .policies import POLICY_NAMES

TASK_DISTS = ("deterministic", "exponential", "pareto", "grid")
SLOWDOWN_MODELS = ("exponential", "gamma", "two_point")
FORMATS = ("csv", "json")


def _key(name: str, **kw):
    return field(metadata={"key": name}, **kw)


@dataclass(frozen=True)
class SystemSection:
    n: int
    k: int
    lam: float = _key("lambda")
    mu: float = 1.0
    alpha: float = 0.6


@dataclass(frozen=True)
class TaskSizeSection:
    dist: str = "deterministic"
    value: float = 1.0
    mean: float = 1.0
    shape: float | None = None
    scale: float | None = None
    points: tuple[tuple[float, float], ...] | None = None
    grid_size: int = 64


@dataclass(frozen=True)
class SlowdownSection:
    model: str = "exponential"
    mu: float | None = None
    shape_coeff: float = 1.0
    shape_floor: float = 1e-3
    straggle_prob: float = 0.9


@dataclass(frozen=True)
class PolicySection:
    name: str = "baseline"
    r_max: int | None = None
    profile_path: str | None = None
    literal: bool = False


@dataclass(frozen=True)
class SimSection:
    horizon: float = 1000.0
    warmup: float | None = None
    seed: int = 0
    batches: int = 32
    replications: int = 1
    drain_margin: float | None = None
    explosion_factor: float = 100.0


@dataclass(frozen=True)
class OptimizeSection:
    grid: tuple[tuple[float, float], ...] | None = None
    slack_exponent: float | None = None
    r_max: int | None = _key("R_max", default=None)
    y_bracket: tuple[float, float] = (1e-6, 1e3)


@dataclass(frozen=True)
class OutputSection:
    dir: str = "out"
    formats: tuple[str, ...] = ("csv", "json")


@dataclass(frozen=True)
class SweepSection:
    param: str = "n"
    values: tuple[float, ...] = ()


SECTIONS = {
    "system": SystemSection,
    "task_size": TaskSizeSection,
    "slowdown": SlowdownSection,
    "policy": PolicySection,
    "sim": SimSection,
    "optimize": OptimizeSection,
    "output": OutputSection,
    "sweep": SweepSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    system: SystemSection
    task_size: TaskSizeSection = TaskSizeSection()
    slowdown: SlowdownSection = SlowdownSection()
    policy: PolicySection = PolicySection()
    sim: SimSection = SimSection()
    optimize: OptimizeSection = OptimizeSection()
    output: OutputSection = OutputSection()
    sweep: SweepSection = SweepSection()

    # -- derived objects -------------------------------------------------------

    def params(self) -> SystemParams:
        s = self.system
        return SystemParams(n=s.n, k=s.k, lam=s.lam, mu=s.mu, alpha=s.alpha)

    def task_sizes(self):
        t = self.task_size
        if t.dist == "deterministic":
            return Deterministic(t.value)
        if t.dist == "exponential":
            return ExponentialSize(t.mean)
        if t.dist == "pareto":
            if t.shape is None:
                raise ConfigurationError("[task_size] pareto needs 'shape'")
            return ParetoSize(t.shape, t.scale)
        if t.points is None:
            raise ConfigurationError("[task_size] grid needs 'points'")
        return DiscreteGrid(t.points)

    def slowdown_model(self):
        s = self.slowdown
        mu = self.system.mu if s.mu is None else s.mu
        if s.model == "exponential":
            return ExponentialSlowdown(mu)
        if s.model == "gamma":
            return GammaSlowdown(mu, s.shape_coeff, s.shape_floor)
        return TwoPointSlowdown(mu, s.straggle_prob)

    def optimizer_grid(self):
        """Grid for the profile optimizer: explicit ``[optimize] grid`` or the task-size quantile grid."""
        if self.optimize.grid is not None:
            g = DiscreteGrid(self.optimize.grid)
            return g.grid()
        return self.task_sizes().grid(self.task_size.grid_size)

    def slack(self) -> float:
        e = self.optimize.slack_exponent
        return 1.0 if e is None else 1.0 - self.system.n ** (e - 1.0)

    def replace(self, section: str, **changes) -> ExperimentConfig:
        new = dataclasses.replace(getattr(self, section), **changes)
        cfg = dataclasses.replace(self, **{section: new})
        validate(cfg)
        return cfg

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            sec = getattr(self, name)
            out[name] = {_ini_key(f): _jsonable(getattr(sec, f.name)) for f in fields(sec)}
        return out


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


def _ini_key(f) -> str:
    return f.metadata.get("key", f.name)


# --------------------------------------------------------------------------
# Value codecs
# --------------------------------------------------------------------------


def _parse_float(s: str) -> float:
    v = float(s)
    if math.isnan(v):
        raise ValueError("NaN is not allowed")
    return v


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_pairs(s: str) -> tuple[tuple[float, float], ...]:
    out = []
    for part in s.split(","):
        part = part.strip()
        if not part:
            continue
        x, sep, w = part.partition(":")
        if not sep:
            raise ValueError(f"expected 'x:weight', got {part!r}")
        out.append((_parse_float(x), _parse_float(w)))
    if not out:
        raise ValueError("empty list of points")
    return tuple(out)


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(_parse_float(p) for p in s.split(",") if p.strip())


def _parse_strs(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


PARSERS = {
    "int": int,
    "float": _parse_float,
    "str": str.strip,
    "bool": _parse_bool,
    "tuple[tuple[float, float], ...]": _parse_pairs,
    "tuple[float, float]": _parse_floats,
    "tuple[float, ...]": _parse_floats,
    "tuple[str, ...]": _parse_strs,
}


def _base_type(annotation: str) -> tuple[str, bool]:
    optional = annotation.endswith(" | None")
    return (annotation[: -len(" | None")] if optional else annotation), optional


def _render_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ", ".join(f"{x!r}:{w!r}" for x, w in v)
        return ", ".join(_render_value(x) for x in v)
    return str(v)


# --------------------------------------------------------------------------
# Parsing and rendering
# --------------------------------------------------------------------------


def _line_of(text: str, section: str, key: str | None) -> int | None:
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return no
            continue
        if current == section and key is not None and re.match(rf"\s*{re.escape(key)}\s*[=:]", line):
            return no
    return None


def _fail(source: str, text: str, section: str, key: str | None, message: str) -> ConfigurationError:
    line = _line_of(text, section, key)
    where = f"{source}:{line}" if line else source
    label = f"[{section}]" + (f" {key}" if key else "")
    return ConfigurationError(f"{where}: {label}: {message}")


def parse(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # keys are case-sensitive (R_max)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigurationError(f"{source}: {exc}") from exc
    sections: dict[str, Any] = {}
    for name in parser.sections():
        if name not in SECTIONS:
            raise _fail(source, text, name, None, f"unknown section; expected one of {', '.join(SECTIONS)}")
    for name, cls in SECTIONS.items():
        raw = dict(parser[name]) if parser.has_section(name) else {}
        by_key = {_ini_key(f): f for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            f = by_key.get(key)
            if f is None:
                raise _fail(source, text, name, key, f"unknown key; expected one of {', '.join(by_key)}")
            base, optional = _base_type(f.type)
            if optional and value.strip().lower() in ("", "none"):
                kwargs[f.name] = None
                continue
            try:
                kwargs[f.name] = PARSERS[base](value)
            except (ValueError, TypeError) as exc:
                raise _fail(source, text, name, key, f"expected {base}: {exc}") from exc
        try:
            sections[name] = cls(**kwargs)
        except TypeError as exc:
            missing = [
                _ini_key(f) for f in fields(cls)
                if f.name not in kwargs and f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
            ]
            raise _fail(source, text, name, None, f"missing required keys: {', '.join(missing)}") from exc
    cfg = ExperimentConfig(**sections)
    try:
        validate(cfg)
    except ConfigurationError as exc:
        sec, key = getattr(exc, "location", (None, None))
        if sec is None:
            raise ConfigurationError(f"{source}: {exc}") from exc
        raise _fail(source, text, sec, key, str(exc)) from exc
    return cfg


def load(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"{path}: cannot read config: {exc.strerror}") from exc
    return parse(text, str(path))


def render(cfg: ExperimentConfig) -> str:
    lines: list[str] = []
    for name in SECTIONS:
        sec = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(sec):
            v = getattr(sec, f.name)
            if v is None:
                continue
            lines.append(f"{_ini_key(f)} = {_render_value(v)}")
        lines.append("")
    return "\n".join(lines)


def _located(message: str, section: str, key: str | None) -> ConfigurationError:
    err = ConfigurationError(message)
    err.location = (section, key)
    return err


def validate(cfg: ExperimentConfig) -> None:
    """Cross-field checks; raises :class:`ConfigurationError` tagged with the offending key."""
    try:
        cfg.params()
    except ConfigurationError as exc:
        msg = str(exc)
        key = next((k for k in ("lambda", "mu", "alpha", "k", "n") if msg.startswith(k)), None)
        raise _located(msg, "system", key) from exc
    t = cfg.task_size
    if t.dist not in TASK_DISTS:
        raise _located(f"unknown distribution {t.dist!r}; choose from {', '.join(TASK_DISTS)}", "task_size", "dist")
    try:
        cfg.task_sizes()
    except ConfigurationError as exc:
        raise _located(str(exc), "task_size", "points" if t.dist == "grid" else None) from exc
    if t.grid_size < 1:
        raise _located("grid_size must be positive", "task_size", "grid_size")
    s = cfg.slowdown
    if s.model not in SLOWDOWN_MODELS:
        raise _located(f"unknown model {s.model!r}; choose from {', '.join(SLOWDOWN_MODELS)}", "slowdown", "model")
    if s.mu is not None and s.mu != cfg.system.mu:
        raise _located(f"slowdown mu={s.mu} differs from system mu={cfg.system.mu}", "slowdown", "mu")
    try:
        cfg.slowdown_model()
    except ConfigurationError as exc:
        raise _located(str(exc), "slowdown", None) from exc
    p = cfg.policy
    if p.name not in POLICY_NAMES:
        raise _located(f"unknown policy {p.name!r}; choose from {', '.join(POLICY_NAMES)}", "policy", "name")
    if p.r_max is not None and p.r_max < cfg.system.k:
        raise _located("r_max must be at least k", "policy", "r_max")
    m = cfg.sim
    if not m.horizon > 0:
        raise _located("horizon must be positive", "sim", "horizon")
    if m.warmup is not None and not 0 <= m.warmup < m.horizon:
        raise _located("need 0 <= warmup < horizon", "sim", "warmup")
    if m.batches < 2:
        raise _located("need at least 2 batches", "sim", "batches")
    if m.replications < 1:
        raise _located("replications must be positive", "sim", "replications")
    if m.seed < 0 or m.seed >= 2**64:
        raise _located("seed must be an unsigned 64-bit integer", "sim", "seed")
    o = cfg.optimize
    if o.grid is not None:
        try:
            DiscreteGrid(o.grid)
        except ConfigurationError as exc:
            raise _located(str(exc), "optimize", "grid") from exc
    if len(o.y_bracket) != 2 or not 0 < o.y_bracket[0] < o.y_bracket[1]:
        raise _located("y_bracket must be 'lo, hi' with 0 < lo < hi", "optimize", "y_bracket")
    if o.slack_exponent is not None and not 0 < o.slack_exponent < 1:
        raise _located("slack_exponent must lie in (0, 1)", "optimize", "slack_exponent")
    if o.r_max is not None and o.r_max < cfg.system.k:
        raise _located("R_max must be at least k", "optimize", "R_max")
    bad = [f for f in cfg.output.formats if f not in FORMATS]
    if bad:
        raise _located(f"unknown formats {bad}; choose from {', '.join(FORMATS)}", "output", "formats")
    if cfg.sweep.param not in ("n", "lambda"):
        raise _located("sweep param must be 'n' or 'lambda'", "sweep", "param")
