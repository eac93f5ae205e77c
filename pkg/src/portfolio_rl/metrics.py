"""Moments, Sharpe ratio, drawdowns, value at risk and performance reports."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .data import ReturnsFrame
from .errors import UndefinedSharpeError, ValidationError

TRADING_DAYS = 252


@dataclass(frozen=True)
class MomentSummary:
    mean: np.ndarray
    covariance: np.ndarray
    skewness: np.ndarray  # NaN where the column is constant
    kurtosis: np.ndarray
    median: np.ndarray
    mode: np.ndarray
    undefined: np.ndarray  # True for constant columns

    @property
    def variance(self) -> np.ndarray:
        return np.diag(self.covariance).copy()

    def correlation(self) -> np.ndarray:
        sd = np.sqrt(np.diag(self.covariance))
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.covariance / np.outer(sd, sd)


def histogram_mode(x: np.ndarray) -> float:
    """Centre of the tallest Freedman-Diaconis histogram bin."""
    x = np.asarray(x, dtype=float)
    if np.ptp(x) == 0:
        return float(x[0])
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    width = 2.0 * iqr * x.size ** (-1 / 3)
    # a tiny interquartile range next to an outlier would ask for billions of bins
    n_bins = int(np.ceil(np.log2(x.size))) + 1 if width <= 0 else int(np.ceil(np.ptp(x) / width))
    counts, edges = np.histogram(x, bins=max(1, min(n_bins, x.size)))
    k = int(np.argmax(counts))
    return float(0.5 * (edges[k] + edges[k + 1]))


def moments(returns) -> MomentSummary:
    """Empirical moments of each column, with Bessel-corrected (co)variance."""
    X = returns.values if isinstance(returns, ReturnsFrame) else np.asarray(returns, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    T = X.shape[0]
    if T < 2:
        raise ValidationError("moments need at least two samples")
    mu = X.mean(axis=0)
    D = X - mu
    cov = D.T @ D / (T - 1)
    cov = 0.5 * (cov + cov.T)
    m2 = (D ** 2).mean(axis=0)
    undefined = m2 <= 1e-15 * np.maximum(1.0, mu ** 2)
    safe = np.where(undefined, 1.0, m2)
    skew = np.where(undefined, np.nan, (D ** 3).mean(axis=0) / safe ** 1.5)
    kurt = np.where(undefined, np.nan, (D ** 4).mean(axis=0) / safe ** 2)
    if np.any(undefined):
        cov[:, undefined] = 0.0
        cov[undefined, :] = 0.0
    return MomentSummary(
        mean=mu,
        covariance=cov,
        skewness=skew,
        kurtosis=kurt,
        median=np.median(X, axis=0),
        mode=np.array([histogram_mode(X[:, i]) for i in range(X.shape[1])]),
        undefined=undefined,
    )


def sharpe_ratio(returns, T: Optional[float] = None) -> float:
    """sqrt(T) * mean / std with Bessel std. `T` defaults to the sample length."""
    r = np.asarray(returns, dtype=float)
    if r.size < 2:
        raise UndefinedSharpeError("Sharpe ratio needs at least two returns")
    sd = r.std(ddof=1)
    if not sd > 1e-15 * max(1.0, abs(r.mean())):
        raise UndefinedSharpeError("Sharpe ratio undefined for zero-variance returns")
    T = r.size if T is None else T
    return float(math.sqrt(T) * r.mean() / sd)


def drawdown_curve(cumulative):
    """Drawdown magnitudes from the running peak of a cumulative-return curve.

    Returns (dd, mdd, avg_duration): dd[t] = max(0, peak - cum[t]),
    mdd its running maximum, and the mean number of steps between a
    peak and the recovery to it (an unrecovered final spell counts up to
    the last step).
    """
    cum = np.asarray(cumulative, dtype=float)
    if cum.size == 0:
        raise ValidationError("drawdown needs a non-empty sequence")
    peak = np.maximum.accumulate(cum)
    dd = np.maximum(0.0, peak - cum)
    mdd = np.maximum.accumulate(dd)
    spells, length = [], 0
    for d in dd:
        if d > 0:
            length += 1
        elif length:
            spells.append(length)
            length = 0
    if length:
        spells.append(length)
    avg = float(np.mean(spells)) if spells else 0.0
    return dd, mdd, avg


def value_at_risk(returns, c: float = 0.05):
    """Empirical c-quantile (linear interpolation) and the mean of the tail at or below it."""
    if not 0.0 < c < 1.0:
        raise ValidationError(f"cutoff must lie in (0, 1), got {c}")
    r = np.asarray(returns, dtype=float)
    if r.size < 2:
        raise ValidationError("value at risk needs at least two returns")
    var = float(np.quantile(r, c, method="linear"))
    tail = r[r <= var]
    cvar = float(tail.mean()) if tail.size else var
    return var, cvar


@dataclass(frozen=True)
class PerformanceReport:
    cumulative_return: float
    sharpe: float
    max_drawdown: float
    avg_drawdown_days: float
    var_5: float
    cvar_5: float
    hit_ratio: float
    win_loss_ratio: float
    steps: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            return v
        return json.dumps({k: clean(v) for k, v in self.to_dict().items()}, sort_keys=True, indent=2)

    @classmethod
    def csv_header(cls) -> list:
        return [f.name for f in fields(cls)]

    def csv_row(self) -> list:
        return [repr(getattr(self, f.name)) for f in fields(self)]


def performance_report(returns, annualize: bool = False) -> PerformanceReport:
    """Summarize a per-step simple-return stream.

    Sharpe uses sqrt(len(returns)) unless `annualize` selects sqrt(252).
    Drawdowns are measured on the compounded cumulative-return curve.
    """
    r = np.asarray(returns, dtype=float)
    if r.size == 0:
        raise ValidationError("empty return stream")
    growth = np.cumprod(1.0 + r)
    cum = np.concatenate([[0.0], growth - 1.0])
    _, mdd, avg_dd = drawdown_curve(cum)
    try:
        sr = sharpe_ratio(r, TRADING_DAYS if annualize else None)
    except UndefinedSharpeError:
        sr = float("nan")
    if r.size >= 2:
        var5, cvar5 = value_at_risk(r, 0.05)
    else:
        var5 = cvar5 = float(r[0])
    pos, neg = r[r > 0], r[r < 0]
    if pos.size and neg.size:
        wl = float(pos.mean() / abs(neg.mean()))
    else:
        wl = float("inf") if pos.size else 0.0
    return PerformanceReport(
        cumulative_return=float(growth[-1] - 1.0),
        sharpe=sr,
        max_drawdown=float(mdd[-1]),
        avg_drawdown_days=avg_dd,
        var_5=var5,
        cvar_5=cvar5,
        hit_ratio=float(pos.size / r.size),
        win_loss_ratio=wl,
        steps=int(r.size),
    )
