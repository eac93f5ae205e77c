import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from portfolio_rl.errors import UndefinedSharpeError, ValidationError
from portfolio_rl.metrics import (PerformanceReport, drawdown_curve, histogram_mode, moments,
                                  performance_report, sharpe_ratio, value_at_risk)

finite = st.floats(-0.2, 0.2, allow_nan=False)


def standardized(n, mean, std, seed=0):
    z = np.random.default_rng(seed).normal(size=n)
    z = (z - z.mean()) / z.std(ddof=1)
    return mean + std * z


def test_constant_column_flags_undefined():
    m = moments(np.array([[1.0], [1.0], [1.0]]))
    assert m.mean[0] == 1.0
    assert m.variance[0] == 0.0
    assert m.undefined[0]
    assert math.isnan(m.skewness[0]) and math.isnan(m.kurtosis[0])


def test_bessel_variance_by_hand():
    m = moments(np.array([[0.0], [2.0]]))
    assert m.mean[0] == 1.0
    assert m.variance[0] == pytest.approx(2.0, abs=1e-15)


def test_self_correlation_is_one():
    x = np.random.default_rng(1).normal(size=(50, 1))
    X = np.hstack([x, x])
    assert np.allclose(moments(X).correlation(), 1.0, atol=1e-12)


@settings(max_examples=60)
@given(arrays(float, st.tuples(st.integers(3, 40), st.integers(1, 5)), elements=finite))
def test_covariance_properties(X):
    m = moments(X)
    C = m.covariance
    assert np.max(np.abs(C - C.T)) <= 1e-12
    assert np.all(np.diag(C) >= 0)
    assert np.linalg.eigvalsh(C).min() >= -1e-10
    ok = ~m.undefined
    assert np.all(m.kurtosis[ok] > 0)


@settings(max_examples=60)
@given(arrays(float, st.tuples(st.integers(3, 30), st.integers(2, 4)), elements=finite),
       st.integers(0, 1000))
def test_portfolio_variance_matches_projection(X, seed):
    w = np.random.default_rng(seed).dirichlet(np.ones(X.shape[1]))
    m = moments(X)
    if np.any(m.undefined):
        return
    assert abs(w @ m.covariance @ w - np.var(X @ w, ddof=1)) <= 1e-9


@pytest.mark.parametrize("mean,std", [(4.0, 3.0), (1.0, 1.0)])
@pytest.mark.parametrize("n", [10, 252])
def test_sharpe_worked_examples(mean, std, n):
    r = standardized(n, mean, std)
    assert sharpe_ratio(r) == pytest.approx(math.sqrt(n) * mean / std, rel=1e-12)


def test_sharpe_zero_variance():
    with pytest.raises(UndefinedSharpeError):
        sharpe_ratio(np.full(5, 0.01))


@settings(max_examples=50)
@given(arrays(float, st.integers(3, 30), elements=st.floats(-1, 1)), st.floats(0.01, 100))
def test_sharpe_scale_invariance(r, k):
    try:
        s = sharpe_ratio(r)
    except UndefinedSharpeError:
        return
    assert sharpe_ratio(r * k) == pytest.approx(s, rel=1e-9, abs=1e-12)


def test_drawdown_hand_trace():
    dd, mdd, _ = drawdown_curve([0.0, 1.0, 0.5, 2.0])
    assert np.allclose(dd, [0, 0, 0.5, 0])
    assert mdd[-1] == 0.5


@pytest.mark.parametrize("seq", [np.arange(10.0), np.full(7, 3.0)])
def test_no_drawdown_without_decline(seq):
    dd, mdd, avg = drawdown_curve(seq)
    assert np.all(dd == 0) and mdd[-1] == 0 and avg == 0


@given(arrays(float, st.integers(1, 50), elements=st.floats(-5, 5)))
def test_mdd_nondecreasing(cum):
    dd, mdd, _ = drawdown_curve(cum)
    assert np.all(np.diff(mdd) >= 0)
    assert np.all(dd >= 0)


def test_var_order_statistics():
    var, cvar = value_at_risk(np.arange(1.0, 101.0), 0.05)
    assert var == pytest.approx(5.95, abs=1e-12)
    assert cvar == pytest.approx(3.0)
    sym = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    assert value_at_risk(sym, 0.5)[0] == np.median(sym)
    assert value_at_risk(np.full(4, 0.3), 0.1) == (pytest.approx(0.3), pytest.approx(0.3))
    with pytest.raises(ValidationError):
        value_at_risk(sym, 1.0)


@given(arrays(float, st.integers(2, 40), elements=finite), st.floats(0.01, 0.98), st.floats(0.0, 0.01))
def test_var_monotone_in_cutoff(r, c, dc):
    assert value_at_risk(r, c)[0] <= value_at_risk(r, min(c + dc, 0.99))[0] + 1e-15


def test_report_fields_and_serialization():
    r = np.array([0.01, -0.02, 0.03, 0.0, -0.01])
    rep = performance_report(r)
    assert rep.cumulative_return == pytest.approx(np.prod(1 + r) - 1)
    assert 0 <= rep.hit_ratio <= 1 and rep.hit_ratio == 0.4
    assert rep.win_loss_ratio == pytest.approx(0.02 / 0.015)
    assert rep.max_drawdown >= 0
    d = json.loads(rep.to_json())
    assert set(d) == set(PerformanceReport.csv_header())
    flat = performance_report(np.zeros(3))
    assert json.loads(flat.to_json())["sharpe"] is None


def test_histogram_mode_with_outlier_and_tiny_spread():
    x = np.r_[np.zeros(38), 1e-300, 0.125]
    assert abs(histogram_mode(x)) < 0.125 / 2
    rng = np.random.default_rng(0)
    assert abs(histogram_mode(rng.normal(3.0, 0.1, 5000)) - 3.0) < 0.05
