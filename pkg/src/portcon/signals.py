"""Equity-factor raw signals and their conversion into ranked predictors.

Every factor is evaluated at the close of a panel date ``t`` and only reads
data available by then; most factors additionally shift their inputs back by
one month (21 trading days).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .data import MarketPanel
from .errors import ConfigError, DegenerateError, WarmupError

__all__ = [
    "FACTORS",
    "LAG_DAYS",
    "Factor",
    "Predictor",
    "RawSignal",
    "compute_raw_signal",
    "momentum_12_1",
    "rank_to_predictor",
]

LAG_DAYS = 21
ASCENDING = "ascending"    # lowest value ranked first: long the highest values
DESCENDING = "descending"  # highest value ranked first: long the lowest values


@dataclass(frozen=True)
class RawSignal:
    factor: str
    date: pd.Timestamp
    stock_ids: tuple[str, ...]
    values: np.ndarray
    direction: str
    lag_days: int

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.values)


@dataclass(frozen=True)
class Predictor:
    """Ranked predictor on the stocks where the raw signal is defined."""

    date: pd.Timestamp
    stock_ids: tuple[str, ...]
    p: np.ndarray

    def __len__(self) -> int:
        return len(self.stock_ids)

    def subset(self, ids) -> "Predictor":
        pos = {s: i for i, s in enumerate(self.stock_ids)}
        ids = tuple(s for s in ids if s in pos)
        return Predictor(self.date, ids, self.p[[pos[s] for s in ids]])

    def to_series(self) -> pd.Series:
        return pd.Series(self.p, index=list(self.stock_ids), name=self.date)


def rank_to_predictor(signal: RawSignal) -> Predictor:
    """Map defined values to ``2 (rank - (N+1)/2) / (N-1)`` with average ranks for ties."""
    mask = signal.defined
    n = int(mask.sum())
    if n < 2:
        raise DegenerateError(f"{signal.factor} on {signal.date.date()}: {n} defined values, need at least 2")
    vals = signal.values[mask]
    if signal.direction == DESCENDING:
        vals = -vals
    ranks = rankdata(vals, method="average")
    p = 2.0 * (ranks - (n + 1) / 2.0) / (n - 1)
    ids = tuple(s for s, m in zip(signal.stock_ids, mask) if m)
    return Predictor(signal.date, ids, p)


def _window(arr: np.ndarray, t: int, length: int, lag: int) -> np.ndarray:
    """Rows ``t-lag-length+1 .. t-lag`` inclusive."""
    end = t - lag + 1
    start = end - length
    if start < 0:
        raise WarmupError(f"need {length + lag} rows of history before row {t}, have {t}")
    return arr[start:end]


def _complete_mean(block: np.ndarray) -> np.ndarray:
    out = block.mean(axis=0)
    out[np.isnan(block).any(axis=0)] = np.nan
    return out


def _momentum(panel: MarketPanel, t: int) -> np.ndarray:
    return _complete_mean(_window(panel.total_return, t, 230, LAG_DAYS))


def momentum_12_1(panel: MarketPanel, t: int) -> np.ndarray:
    """Compounded return over the past 12 months skipping the most recent month."""
    block = _window(panel.total_return, t, 252 - LAG_DAYS, LAG_DAYS)
    out = np.prod(1.0 + block, axis=0) - 1.0
    out[np.isnan(block).any(axis=0)] = np.nan
    return out


def _lowvol(panel: MarketPanel, t: int) -> np.ndarray:
    block = _window(panel.total_return, t, 180, LAG_DAYS)
    out = block.std(axis=0, ddof=1)
    out[np.isnan(block).any(axis=0)] = np.nan
    return out


def _size(panel: MarketPanel, t: int) -> np.ndarray:
    return _complete_mean(_window(panel.market_cap, t, 250, LAG_DAYS))


def _ratio_to_cap(field: str) -> Callable[[MarketPanel, int], np.ndarray]:
    def compute(panel: MarketPanel, t: int) -> np.ndarray:
        s = t - LAG_DAYS
        if s < 0:
            raise WarmupError(f"need {LAG_DAYS} rows of history before row {t}")
        with np.errstate(invalid="ignore", divide="ignore"):
            return panel.fundamental_asof(field, panel.dates[s]) / panel.market_cap[s]

    return compute


def _ratio_to_assets(field: str) -> Callable[[MarketPanel, int], np.ndarray]:
    def compute(panel: MarketPanel, t: int) -> np.ndarray:
        s = t - LAG_DAYS
        if s < 0:
            raise WarmupError(f"need {LAG_DAYS} rows of history before row {t}")
        d = panel.dates[s]
        with np.errstate(invalid="ignore", divide="ignore"):
            return panel.fundamental_asof(field, d) / panel.fundamental_asof("total_assets", d)

    return compute


def _accrual(panel: MarketPanel, t: int) -> np.ndarray:
    d = panel.dates[t]
    noa = panel.fundamental_asof("net_operating_assets", d)
    noa_prev = panel.fundamental_asof("net_operating_assets", d - pd.Timedelta(days=365))
    assets = panel.fundamental_asof("total_assets", d)
    with np.errstate(invalid="ignore", divide="ignore"):
        return (noa - noa_prev) / assets


def _lowbeta(panel: MarketPanel, t: int) -> np.ndarray:
    from .covariance import clip_spectrum, estimate_correlation, first_factor_beta

    present = panel.present[t]
    ids = [s for s, ok in zip(panel.stock_ids, present) if ok]
    est = estimate_correlation(panel, ids, t + 1, window=LOWBETA_WINDOW)
    model = clip_spectrum(est.correlation, est.sigma, 1, stock_ids=est.stock_ids)
    caps = panel.market_cap[t, panel.columns(model.stock_ids)]
    beta = first_factor_beta(model, caps)
    out = np.full(panel.n_stocks, np.nan)
    out[panel.columns(model.stock_ids)] = beta.beta
    return out


def _alpha(panel: MarketPanel, t: int) -> np.ndarray:
    if panel.alpha is None:
        raise ConfigError(f"factor 'alpha' needs a synthetic panel with embedded alpha; {panel.name} has none")
    return np.array(panel.alpha[t])


LOWBETA_WINDOW = 252


@dataclass(frozen=True)
class Factor:
    name: str
    compute: Callable[[MarketPanel, int], np.ndarray]
    direction: str
    lag_days: int
    history: int  # rows of panel history needed before the evaluation row


FACTORS: dict[str, Factor] = {
    f.name: f
    for f in (
        Factor("accrual", _accrual, ASCENDING, 0, 0),
        Factor("book", _ratio_to_cap("total_equity"), ASCENDING, LAG_DAYS, LAG_DAYS),
        Factor("cashflow", _ratio_to_cap("operating_cash_flow"), ASCENDING, LAG_DAYS, LAG_DAYS),
        Factor("divyield", _ratio_to_cap("dividends"), ASCENDING, LAG_DAYS, LAG_DAYS),
        Factor("earnyield", _ratio_to_cap("net_income"), ASCENDING, LAG_DAYS, LAG_DAYS),
        Factor("growth", _ratio_to_assets("operating_cash_flow"), ASCENDING, LAG_DAYS, LAG_DAYS),
        Factor("quality", _ratio_to_assets("net_income"), ASCENDING, LAG_DAYS, LAG_DAYS),
        Factor("lowbeta", _lowbeta, DESCENDING, 0, LOWBETA_WINDOW + 1),
        Factor("lowvol", _lowvol, DESCENDING, LAG_DAYS, 180 + LAG_DAYS),
        Factor("momentum", _momentum, ASCENDING, LAG_DAYS, 230 + LAG_DAYS),
        Factor("size", _size, DESCENDING, LAG_DAYS, 250 + LAG_DAYS - 1),
        # latent signal of a synthetic panel, known at the close of t
        Factor("alpha", _alpha, ASCENDING, 0, 0),
    )
}

STANDARD_FACTORS = tuple(n for n in FACTORS if n != "alpha")


def get_factor(name: str) -> Factor:
    try:
        return FACTORS[name]
    except KeyError:
        raise ConfigError(f"unknown factor {name!r}; valid ids: {', '.join(FACTORS)}") from None


def compute_raw_signal(factor: str, panel: MarketPanel, date) -> RawSignal:
    """Raw factor values for every panel stock at the close of ``date``.

    Stocks without sufficient history, fundamentals or a close on ``date``
    get NaN.
    """
    f = get_factor(factor)
    t = date if isinstance(date, (int, np.integer)) else panel.date_index(date)
    values = np.asarray(f.compute(panel, int(t)), dtype=float).copy()
    values[~panel.present[t]] = np.nan
    values[~np.isfinite(values)] = np.nan
    return RawSignal(f.name, panel.dates[t], panel.stock_ids, values, f.direction, f.lag_days)


def predictor_at(factor: str, panel: MarketPanel, t: int, ids=None) -> Predictor:
    """Ranked predictor at row ``t``, restricted to ``ids`` before ranking."""
    raw = compute_raw_signal(factor, panel, t)
    if ids is not None:
        keep = np.zeros(panel.n_stocks, dtype=bool)
        keep[panel.columns(ids)] = True
        values = np.where(keep, raw.values, np.nan)
        raw = RawSignal(raw.factor, raw.date, raw.stock_ids, values, raw.direction, raw.lag_days)
    return rank_to_predictor(raw)

