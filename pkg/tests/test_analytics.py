import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from forkjoin.analytics import (
    batch_means,
    block_service_mean,
    bound_report,
    delay_lower_bound,
    delay_lower_bound_asymptotic,
    dq_asymptotic_service,
    drift_test,
    frec_asymptotic_service,
)
from forkjoin.errors import DomainError, InsufficientData
from forkjoin.model import SystemParams


def p(lam, mu=1.0, k=1, n=1000, alpha=0.6):
    return SystemParams(n=n, k=k, lam=lam, mu=mu, alpha=alpha)


def test_lower_bound_k1():
    assert delay_lower_bound(p(0.25)) == pytest.approx(4 / 3, abs=1e-12)


def test_lower_bound_k2():
    assert delay_lower_bound(p(0.25, k=2)) == pytest.approx(41 / 30, abs=1e-12)


def test_asymptotic_bound():
    assert delay_lower_bound_asymptotic(p(0.25)) == pytest.approx(1 + math.log(1.5), abs=1e-12)


def test_dq_zero_gap_at_integer_budget():
    assert dq_asymptotic_service(p(0.25, k=2)) == pytest.approx(41 / 30, abs=1e-12)


def test_frec_k1():
    assert frec_asymptotic_service(p(0.4)) == pytest.approx(1.75, abs=1e-12)


def test_frec_finite_n_mixture():
    q = 0.5 - 2 * 2000**-0.4
    got = frec_asymptotic_service(p(0.4, n=2000), finite_n=True)
    assert got == pytest.approx(1 + q / 2 + (1 - q), abs=1e-12)


def test_dq_finite_n_mixture():
    q = max(0.0, 1.0 - 2 * 1000**-0.2)
    got = dq_asymptotic_service(p(0.25, k=2, n=1000, alpha=0.8), finite_n=True)
    assert got == pytest.approx(q * 41 / 30 + (1 - q) * 1.45, abs=1e-12)


def test_frec_rejects_k_above_one():
    with pytest.raises(DomainError):
        frec_asymptotic_service(p(0.25, k=2))


def test_unstable_inputs_rejected():
    for fn in (delay_lower_bound, delay_lower_bound_asymptotic, frec_asymptotic_service, dq_asymptotic_service):
        with pytest.raises(DomainError):
            fn(p(0.5))


def test_block_service_mean():
    assert block_service_mean(3, 1, 1.0) == pytest.approx(4 / 3)
    assert block_service_mean(4, 2, 1.0) == pytest.approx(1 + 1 / 4 + 1 / 3)


@given(lam=st.floats(0.02, 0.45), k=st.integers(1, 30))
def test_lower_bound_below_dq_asymptote(lam, k):
    prm = p(lam, k=k, n=max(k, 1000))
    lower = delay_lower_bound(prm)
    try:
        dq = dq_asymptotic_service(prm)
    except DomainError:
        return
    assert lower <= dq + 1e-12


@given(lam=st.floats(0.02, 0.45))
def test_lower_bound_increases_with_k_toward_limit(lam):
    vals = [delay_lower_bound(p(lam, k=k, n=200)) for k in (1, 2, 4, 8, 16, 64)]
    limit = delay_lower_bound_asymptotic(p(lam))
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
    assert vals[-1] <= limit + 1e-12


@given(lam=st.floats(0.02, 0.45), k=st.integers(1, 30))
def test_dq_limit_at_least_fixed_k_bound(lam, k):
    prm = p(lam, k=k, n=max(k, 100))
    assert dq_asymptotic_service(prm, k_limit=True) >= delay_lower_bound(prm) - 1e-12


@given(lam=st.floats(0.02, 0.45))
def test_frec_k1_matches_lower_bound_at_integer_or_above(lam):
    prm = p(lam)
    try:
        frec = frec_asymptotic_service(prm)
    except DomainError:
        return
    assert frec >= delay_lower_bound(prm) - 1e-12


def test_bound_report_fields():
    rep = bound_report(p(0.25, k=2, n=1000, alpha=0.8)).to_dict()
    assert rep["lambda"] == 0.25
    assert rep["frec_asymptote"] is None
    assert rep["gap"] == pytest.approx(0.0, abs=1e-12)
    assert rep["lower_bound_delay"] == pytest.approx(41 / 30)


def test_bound_report_unstable():
    with pytest.raises(DomainError):
        bound_report(p(0.55))


# -- output analysis --------------------------------------------------------


def test_batch_means_constant_data_has_zero_width():
    est = batch_means(np.full(320, 2.5), batches=32)
    assert est.mean == est.lo == est.hi == 2.5


def test_batch_means_needs_enough_data():
    with pytest.raises(InsufficientData) as info:
        batch_means(np.ones(10), batches=32)
    assert info.value.count == 10


def test_batch_means_rejects_single_batch():
    with pytest.raises(ValueError):
        batch_means(np.ones(10), batches=1)


def test_batch_means_coverage_on_iid_normals():
    rng = np.random.default_rng(99)
    trials = 400
    hits = sum(batch_means(rng.normal(3.0, 1.0, 3200), batches=32).covers(3.0) for _ in range(trials))
    # 95% nominal; binomial sd about 1.1%
    assert 0.91 <= hits / trials <= 0.99


def test_drift_test_detects_trend():
    t = np.linspace(0, 100, 4000)
    rng = np.random.default_rng(1)
    slope, tstat = drift_test(t, 0.5 * t + rng.normal(0, 1, t.size))
    assert slope == pytest.approx(0.5, rel=0.02)
    assert tstat > 10


def test_drift_test_flat_series():
    t = np.linspace(0, 100, 4000)
    rng = np.random.default_rng(2)
    _, tstat = drift_test(t, rng.normal(0, 1, t.size))
    assert abs(tstat) < 4


def test_drift_test_constant_series():
    t = np.linspace(0, 1, 100)
    assert drift_test(t, np.ones(100)) == (0.0, 0.0)
