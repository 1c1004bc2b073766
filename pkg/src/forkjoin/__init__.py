"""Simulation, bounds and replication-profile optimization for partial fork-join systems."""

from .analytics import (
    BoundReport,
    bound_report,
    delay_lower_bound,
    delay_lower_bound_asymptotic,
    dq_asymptotic_service,
    frec_asymptotic_service,
    summarize,
)
from .engine import SimulationResult, Simulator, run_simulation
from .errors import (
    ConfigurationError,
    ContractViolation,
    DomainError,
    ForkJoinError,
    InfeasibleError,
    InsufficientData,
    NumericalError,
    RmaxTooSmall,
)
from .model import (
    Deterministic,
    DiscreteGrid,
    ExponentialSize,
    ExponentialSlowdown,
    GammaSlowdown,
    ParetoSize,
    RngStream,
    SystemParams,
    TwoPointSlowdown,
    exp_order_stat_mean,
    is_stabilizable,
    order_stat_mean,
    p_k,
    r_star,
    sample_slowdown,
)
from .optimizer import ReplicationProfile, check_assumption_convexity, solve
from .policies import (
    PolicyInstance,
    build_baseline,
    build_dq,
    build_frec,
    build_policy,
    build_sb_dq,
    build_sb_frec,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
