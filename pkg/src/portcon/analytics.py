"""Performance and risk diagnostics for strategy P&L series."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.stats import skew

from .errors import DataError, DegenerateError

__all__ = [
    "KinkEvent",
    "SkewCurve",
    "conditional_performance",
    "detect_kinks",
    "exposures",
    "rolling_stats",
    "sharpe_and_tstat",
    "skew_curve",
    "to_weekly",
    "weekly_closes",
]

TRADING_DAYS = 252
KINK_WINDOW = 9
KINK_LOOKBACK = 26
KINK_VOL_WEEKS = 52
KINK_EVAL_WEEKS = 4


def sharpe_and_tstat(pnl: Sequence[float] | np.ndarray, periods_per_year: int = TRADING_DAYS) -> dict:
    """Annualised Sharpe ratio and its t-statistic ``SR * sqrt(years)``."""
    x = np.asarray(pnl, dtype=float)
    x = x[~np.isnan(x)]
    if len(x) < 2:
        raise DegenerateError("Sharpe ratio needs at least 2 observations")
    sd = float(np.std(x, ddof=1))
    scale = float(np.max(np.abs(x)))
    if not sd > 1e-12 * scale or sd == 0:
        raise DegenerateError("P&L has zero variance; Sharpe ratio is undefined")
    sr = float(np.mean(x)) / sd * math.sqrt(periods_per_year)
    years = len(x) / periods_per_year
    return {"sharpe_annualized": sr, "tstat": sr * math.sqrt(years)}


def rolling_stats(
    pnl: pd.Series,
    index_returns: pd.Series,
    window: int = TRADING_DAYS,
    normalize: bool = True,
) -> pd.DataFrame:
    """Trailing-window volatility of ``pnl`` and its correlation with the index.

    With ``normalize`` the volatility series is divided by its time average.
    Values before a full window are NaN.
    """
    pnl = pd.Series(pnl, dtype=float)
    idx = pd.Series(index_returns, dtype=float).reindex(pnl.index)
    vol = pnl.rolling(window, min_periods=window).std()
    if normalize:
        m = vol.mean()
        if m and np.isfinite(m):
            vol = vol / m
    corr = pnl.rolling(window, min_periods=window).corr(idx)
    return pd.DataFrame({"rolling_vol": vol, "rolling_corr": corr})


def exposures(
    positions: pd.DataFrame,
    sectors: Mapping[str, str] | Sequence[str],
    beta: pd.DataFrame | pd.Series | np.ndarray | None = None,
) -> dict:
    """Net-over-gross, average absolute sector exposure and beta exposure.

    ``positions`` is dates x stocks. ``beta`` may be a per-stock vector or a
    dates x stocks frame. Dates with zero gross get NaN ratios and are
    listed under ``undefined_dates``.
    """
    x = positions.to_numpy(dtype=float)
    gross = np.abs(x).sum(axis=1)
    zero = gross <= 0
    with np.errstate(invalid="ignore", divide="ignore"):
        nog = np.where(zero, np.nan, x.sum(axis=1) / gross)
    if isinstance(sectors, Mapping):
        labels = np.array([sectors[s] for s in positions.columns])
    else:
        labels = np.asarray(list(sectors))
    table = {}
    for sec in sorted(set(labels)):
        cols = labels == sec
        with np.errstate(invalid="ignore", divide="ignore"):
            e = np.abs(x[:, cols].sum(axis=1)) / gross
        table[sec] = float(np.nanmean(e[~zero])) if (~zero).any() else math.nan
    beta_exp = None
    if beta is not None:
        b = beta.to_numpy(dtype=float) if isinstance(beta, (pd.DataFrame, pd.Series)) else np.asarray(beta, dtype=float)
        beta_exp = pd.Series(np.nansum(x * b, axis=1), index=positions.index)
    return {
        "net_over_gross": pd.Series(nog, index=positions.index),
        "sector": pd.Series(table, dtype=float),
        "average_sector_exposure": float(np.nanmean(list(table.values()))) if table else math.nan,
        "beta_exposure": beta_exp,
        "undefined_dates": list(positions.index[zero]),
    }


def to_weekly(daily: pd.Series) -> pd.Series:
    """Sum daily values within ISO weeks (Monday to Sunday), labelled by the Sunday."""
    s = pd.Series(daily, dtype=float)
    s.index = pd.DatetimeIndex(s.index)
    counts = s.resample("W-SUN").count()
    return s.resample("W-SUN").sum()[counts > 0]


def weekly_closes(daily_returns: pd.Series, start: float = 1.0) -> pd.Series:
    """Index level at the last trading day of each ISO week, from daily returns."""
    r = pd.Series(daily_returns, dtype=float).fillna(0.0)
    r.index = pd.DatetimeIndex(r.index)
    level = start * (1.0 + r).cumprod()
    counts = level.resample("W-SUN").count()
    return level.resample("W-SUN").last()[counts > 0]


@dataclass(frozen=True)
class SkewCurve:
    order: pd.Index
    pnl: np.ndarray
    cumulative: np.ndarray
    skewness: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"rank": np.arange(1, len(self.pnl) + 1), "pnl": self.pnl, "cum_pnl": self.cumulative}
        )


def skew_curve(pnl_weekly: pd.Series | Sequence[float], min_weeks: int = 10) -> SkewCurve:
    """Weekly P&L sorted by absolute size (ties keep date order) and cumulated.

    The skewness is the bias-corrected sample skewness of the unsorted series.
    """
    s = pd.Series(pnl_weekly, dtype=float).dropna()
    if len(s) < min_weeks:
        raise DataError(f"skew curve needs at least {min_weeks} weekly observations, got {len(s)}")
    vals = s.to_numpy()
    order = np.argsort(np.abs(vals), kind="stable")
    sorted_vals = vals[order]
    # correctly rounded partial sums, so the last one is the exact total
    cum = np.array([math.fsum(sorted_vals[: i + 1]) for i in range(len(sorted_vals))])
    return SkewCurve(s.index[order], sorted_vals, cum, float(skew(vals, bias=False)))


@dataclass(frozen=True)
class KinkEvent:
    kind: str  # "minimum" or "maximum"
    date: pd.Timestamp
    depth_sigma: float
    eval_window: tuple[pd.Timestamp, ...]
    n: float = 0.0


def kink_candidates(closes: pd.Series) -> list[KinkEvent]:
    """Every local extremum with its depth in weekly-volatility units, before thresholding.

    A week is a minimum (maximum) if its close is the strict minimum (maximum)
    over the 9 weeks centred on it. Depth runs from the highest (lowest)
    close of the previous 26 weeks to the extremum, as a log move, divided by
    the standard deviation of the 52 weekly log returns ending at the
    extremum week. Weeks without that history, or without 4 following weeks,
    are skipped.
    """
    c = pd.Series(closes, dtype=float)
    if (c <= 0).any():
        raise DataError("index closes must be positive")
    logc = np.log(c.to_numpy())
    ret = np.diff(logc, prepend=np.nan)
    dates = c.index
    half = KINK_WINDOW // 2
    first = max(KINK_VOL_WEEKS, KINK_LOOKBACK, half)
    events = []
    for t in range(first, len(c) - max(half, KINK_EVAL_WEEKS)):
        win = logc[t - half : t + half + 1]
        others = np.delete(win, half)
        vol = float(np.std(ret[t - KINK_VOL_WEEKS + 1 : t + 1], ddof=1))
        if not vol > 0:
            continue
        prior = logc[t - KINK_LOOKBACK : t]
        evalw = tuple(dates[t + 1 : t + 1 + KINK_EVAL_WEEKS])
        if logc[t] < others.min():
            events.append(KinkEvent("minimum", dates[t], float((prior.max() - logc[t]) / vol), evalw))
        elif logc[t] > others.max():
            events.append(KinkEvent("maximum", dates[t], float((logc[t] - prior.min()) / vol), evalw))
    return events


def detect_kinks(index_weekly_closes: pd.Series, n: float, min_weeks: int = KINK_VOL_WEEKS + KINK_WINDOW) -> list[KinkEvent]:
    """Local index extrema whose draw-down (draw-up) is at least ``n`` weekly vols."""
    if len(index_weekly_closes) < min_weeks:
        raise DataError(f"kink detection needs at least {min_weeks} weeks of index history, got {len(index_weekly_closes)}")
    return [
        KinkEvent(e.kind, e.date, e.depth_sigma, e.eval_window, float(n))
        for e in kink_candidates(index_weekly_closes)
        if e.depth_sigma >= n
    ]


def conditional_performance(
    pnl_weekly: pd.Series,
    events: Iterable[KinkEvent],
    ns: Sequence[float] = (1, 2, 3),
) -> pd.DataFrame:
    """Mean strategy P&L summed over each event's 4-week window, per kind and threshold.

    ``events`` are candidates carrying ``depth_sigma``; an event counts for
    threshold n when its depth is at least n. Rows with no events have
    count 0 and NaN mean, never 0.
    """
    pnl = pd.Series(pnl_weekly, dtype=float)
    events = list(events)
    rows = []
    for kind in ("minimum", "maximum"):
        for n in ns:
            sums = []
            for e in events:
                if e.kind != kind or e.depth_sigma < n:
                    continue
                window = pnl.reindex(list(e.eval_window))
                if window.isna().all():
                    continue
                sums.append(math.fsum(window.fillna(0.0)))
            cnt = len(sums)
            mean = math.fsum(sums) / cnt if cnt else math.nan
            se = float(np.std(sums, ddof=1) / math.sqrt(cnt)) if cnt > 1 else math.nan
            rows.append({"kind": kind, "n": n, "mean": mean, "stderr": se, "count": cnt})
    return pd.DataFrame(rows, columns=["kind", "n", "mean", "stderr", "count"])


def summary(pnl: np.ndarray, dates: pd.DatetimeIndex | None = None) -> dict:
    """Sharpe, t-stat, annualised vol and weekly skewness of a daily P&L series."""
    x = np.asarray(pnl, dtype=float)
    out = {"days": int(len(x)), "vol_annualized": float(np.std(x, ddof=1) * math.sqrt(TRADING_DAYS)) if len(x) > 1 else math.nan}
    try:
        out.update(sharpe_and_tstat(x))
    except DegenerateError:
        out.update({"sharpe_annualized": math.nan, "tstat": math.nan})
    if dates is not None:
        weekly = to_weekly(pd.Series(x, index=dates))
        out["skewness_weekly"] = float(skew(weekly.to_numpy(), bias=False)) if len(weekly) > 2 else math.nan
    out["total_pnl"] = math.fsum(x)
    return out
