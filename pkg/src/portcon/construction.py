"""Portfolio construction schemes.

Every builder returns weights normalised to unit gross exposure, so outputs of
different schemes are directly comparable before any risk targeting.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .covariance import BetaVector, SpectralCovariance, apply_covariance, apply_inverse
from .errors import ConfigError, DegenerateError, ParameterError, RescalingError
from .signals import Predictor

__all__ = [
    "DEFAULT_HALFLIFE_GRID",
    "FF_FRACTION",
    "CostAwareMarkowitz",
    "IndexWeights",
    "Portfolio",
    "SchemeSpec",
    "build_beta",
    "build_betaopt",
    "build_cost_aware",
    "build_ff",
    "build_markowitz",
    "build_neutral",
    "ema_rerank",
    "parse_scheme",
]

FF_FRACTION = 0.30
DEFAULT_HALFLIFE_GRID = (1, 2, 5, 10, 21, 42, 63)


@dataclass(frozen=True)
class Portfolio:
    stock_ids: tuple[str, ...]
    x: np.ndarray
    scheme: str
    date: pd.Timestamp | None = None

    @property
    def gross(self) -> float:
        return float(np.abs(self.x).sum())

    @property
    def net(self) -> float:
        return float(self.x.sum())

    def to_series(self) -> pd.Series:
        return pd.Series(self.x, index=list(self.stock_ids), name=self.date)


@dataclass(frozen=True)
class IndexWeights:
    stock_ids: tuple[str, ...]
    w: np.ndarray

    @classmethod
    def from_caps(cls, stock_ids: Sequence[str], caps: np.ndarray) -> "IndexWeights":
        caps = np.asarray(caps, dtype=float)
        if np.any(~np.isfinite(caps)) or np.any(caps < 0) or caps.sum() <= 0:
            raise DegenerateError("index weights need non-negative caps with a positive total")
        return cls(tuple(stock_ids), caps / caps.sum())


def _unit_gross(x: np.ndarray, what: str) -> np.ndarray:
    g = np.abs(x).sum()
    if not (np.isfinite(g) and g > 0):
        raise DegenerateError(f"{what}: portfolio has zero gross exposure")
    return x / g


def _check_same(ids_a: Sequence[str], ids_b: Sequence[str], what: str) -> None:
    if tuple(ids_a) != tuple(ids_b):
        raise ParameterError(f"{what}: stock ids of predictor and {what} inputs differ")


def build_ff(predictor: Predictor, caps: np.ndarray) -> Portfolio:
    """Long the top 30% and short the bottom 30% by predictor, cap-weighted within each leg.

    Bucket cuts are inclusive: a stock whose rank quantile sits exactly on the
    30% or 70% boundary belongs to the bucket. Each leg has gross 0.5.
    """
    n = len(predictor)
    if n < 4:
        raise DegenerateError(f"FF needs at least 4 stocks, got {n}")
    caps = np.asarray(caps, dtype=float)
    if caps.shape != (n,) or np.any(~(caps > 0)):
        raise DegenerateError("FF needs a positive cap for every predictor stock")
    q = (rankdata(predictor.p, method="average") - 1.0) / (n - 1)
    tol = 1e-12
    long_ = q >= 1.0 - FF_FRACTION - tol
    short = q <= FF_FRACTION + tol
    if not long_.any() or not short.any() or (long_ & short).any():
        raise DegenerateError("FF buckets are empty or overlap (predictor has no spread)")
    x = np.zeros(n)
    x[long_] = 0.5 * caps[long_] / caps[long_].sum()
    x[short] = -0.5 * caps[short] / caps[short].sum()
    return Portfolio(predictor.stock_ids, x, "ff", predictor.date)


def build_neutral(predictor: Predictor) -> Portfolio:
    if len(predictor) < 2:
        raise DegenerateError("neutral needs at least 2 stocks")
    x = predictor.p - predictor.p.mean()
    if np.ptp(predictor.p) == 0:
        raise DegenerateError("neutral: predictor is constant across stocks")
    return Portfolio(predictor.stock_ids, _unit_gross(x, "neutral"), "neutral", predictor.date)


def beta_legs(x: np.ndarray, beta: np.ndarray) -> tuple[float, float]:
    long_ = x > 0
    return float(x[long_] @ beta[long_]), float(x[~long_] @ beta[~long_])


def build_beta(predictor: Predictor, beta: BetaVector | np.ndarray) -> Portfolio:
    """Neutral weights with the long leg rescaled so the two legs' betas cancel."""
    b = beta.subset(predictor.stock_ids) if isinstance(beta, BetaVector) else np.asarray(beta, dtype=float)
    if b.shape != (len(predictor),) or np.any(~np.isfinite(b)):
        raise RescalingError("beta must be defined for every predictor stock")
    x = build_neutral(predictor).x
    b_long, b_short = beta_legs(x, b)
    if not b_long > 0 or not b_short < 0:
        raise RescalingError(f"cannot neutralise legs with aggregate betas {b_long:.3g} (long) and {b_short:.3g} (short)")
    x = np.where(x > 0, x * (-b_short / b_long), x)
    return Portfolio(predictor.stock_ids, _unit_gross(x, "beta"), "beta", predictor.date)


def betaopt_weights(p: np.ndarray, model: SpectralCovariance, w: np.ndarray) -> np.ndarray:
    """``p - (w'Cp / w'Cw) w`` before gross normalisation."""
    cw = apply_covariance(model, w)
    wcw = float(w @ cw)
    if not wcw > 0:
        raise DegenerateError("index variance w'Cw is not positive")
    return p - (float(cw @ p) / wcw) * w


def build_betaopt(predictor: Predictor, model: SpectralCovariance, index_w: IndexWeights) -> Portfolio:
    """Closest portfolio to the predictor in the C-norm with zero beta to the index.

    Beta is taken proportional to ``C w``, which turns the constrained problem
    into a rank-one correction along the index weights.
    """
    _check_same(predictor.stock_ids, model.stock_ids, "covariance model")
    _check_same(predictor.stock_ids, index_w.stock_ids, "index weights")
    x = betaopt_weights(predictor.p, model, index_w.w)
    if np.abs(x).sum() <= 1e-12 * np.abs(predictor.p).sum():
        raise DegenerateError("betaopt: predictor is proportional to the index weights")
    return Portfolio(predictor.stock_ids, _unit_gross(x, "betaopt"), "betaopt", predictor.date)


def build_markowitz(predictor: Predictor, model: SpectralCovariance) -> Portfolio:
    _check_same(predictor.stock_ids, model.stock_ids, "covariance model")
    x = apply_inverse(model, predictor.p)
    return Portfolio(predictor.stock_ids, _unit_gross(x, "markowitz"), f"markowitz:k={model.k}", predictor.date)


def ema_rerank(history: pd.DataFrame, halflife: float) -> pd.DataFrame:
    """Exponentially smooth each stock's predictor through time, then re-rank each row.

    ``history`` is dates x stocks with NaN where a stock has no predictor.
    A stock's average restarts when it re-enters after a gap. ``halflife=0``
    returns the input unchanged.
    """
    if halflife == 0:
        return history.copy()
    if halflife < 0:
        raise ParameterError("halflife must be >= 0")
    vals = history.to_numpy(dtype=float)
    out = np.full_like(vals, np.nan)
    state = np.full(vals.shape[1], np.nan)
    for t in range(len(vals)):
        state = ema_update(state, vals[t], halflife)
        out[t] = rerank(state)
    return pd.DataFrame(out, index=history.index, columns=history.columns)


def ema_update(state: np.ndarray, row: np.ndarray, halflife: float) -> np.ndarray:
    """One step of the per-stock exponential average; NaN in ``row`` clears the stock."""
    if halflife == 0:
        return row.copy()
    a = 1.0 - 2.0 ** (-1.0 / halflife)
    have = ~np.isnan(row)
    fresh = have & np.isnan(state)
    return np.where(fresh, row, np.where(have, (1 - a) * state + a * row, np.nan))


def rerank(row: np.ndarray) -> np.ndarray:
    """Rank map onto [-1, 1] over the non-NaN entries of ``row``."""
    out = np.full_like(row, np.nan)
    have = ~np.isnan(row)
    n = int(have.sum())
    if n >= 2:
        r = rankdata(row[have], method="average")
        out[have] = 2.0 * (r - (n + 1) / 2.0) / (n - 1)
    return out


def simulate_markowitz_path(
    predictors: pd.DataFrame,
    next_returns: pd.DataFrame,
    models: Sequence[SpectralCovariance],
    cost_rate: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Daily pre-cost P&L and cost of trading Markowitz portfolios built on each row.

    ``next_returns`` row t holds the returns earned from t to t+1; ``models[t]``
    covers the stocks used on row t.
    """
    pnl = np.zeros(len(predictors))
    cost = np.zeros(len(predictors))
    prev = pd.Series(dtype=float)
    for t, (date, row) in enumerate(predictors.iterrows()):
        model = models[t]
        p = row.reindex(list(model.stock_ids)).to_numpy()
        if np.isnan(p).any() or len(p) < 2:
            x = pd.Series(dtype=float)
        else:
            x = pd.Series(apply_inverse(model, p), index=list(model.stock_ids))
            x = x / x.abs().sum()
        r = next_returns.iloc[t].reindex(x.index).fillna(0.0)
        pnl[t] = float(x @ r) if len(x) else 0.0
        trade = x.subtract(prev, fill_value=0.0).abs().sum()
        cost[t] = cost_rate * trade
        prev = x
    return pnl, cost


def calibration_score(pnl: np.ndarray, cost: np.ndarray) -> float:
    """Annualised net mean over the pre-cost volatility."""
    sd = float(np.std(pnl, ddof=1)) if len(pnl) > 1 else 0.0
    if not sd > 0:
        return -math.inf
    return float(np.mean(pnl - cost)) / sd * math.sqrt(252)


@dataclass
class CostAwareMarkowitz:
    """Markowitz on a slowed-down predictor, the slowdown tuned to trading costs.

    The halflife of the per-stock exponential average is picked from ``grid``
    by maximising net-of-cost performance on a calibration window that ends
    strictly before the dates it is used for. With zero costs nothing favours
    a slowdown and the smallest grid value is taken without a search; a
    halflife of 0 means no smoothing.
    """

    k: int = 5
    grid: tuple[float, ...] = DEFAULT_HALFLIFE_GRID
    halflife: float | None = None
    scores: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.grid:
            raise ConfigError("halflife grid is empty")
        self.grid = tuple(sorted(float(h) for h in self.grid))
        if self.grid[0] < 0:
            raise ConfigError("halflives must be >= 0")

    def calibrate(
        self,
        predictors: pd.DataFrame,
        next_returns: pd.DataFrame,
        models: Sequence[SpectralCovariance],
        cost_rate: float,
        min_history: int = 252,
    ) -> float:
        if len(predictors) < min_history:
            raise ParameterError(f"cost-aware calibration needs {min_history} days of predictor history, got {len(predictors)}")
        if cost_rate == 0:
            self.halflife, self.scores = self.grid[0], {}
            return self.halflife
        scores = {}
        for h in self.grid:
            smooth = ema_rerank(predictors, h)
            pnl, cost = simulate_markowitz_path(smooth, next_returns, models, cost_rate)
            scores[h] = calibration_score(pnl, cost)
        best = max(self.grid, key=lambda h: (scores[h], -h))
        self.halflife, self.scores = best, scores
        return best

    def build(self, predictor_history: pd.DataFrame, model: SpectralCovariance) -> Portfolio:
        if self.halflife is None:
            raise ParameterError("cost-aware scheme used before calibration")
        smooth = ema_rerank(predictor_history, self.halflife).iloc[-1]
        return self.build_smoothed(smooth, model, predictor_history.index[-1])

    def build_smoothed(self, smooth: pd.Series, model: SpectralCovariance, date=None) -> Portfolio:
        """Markowitz weights for an already smoothed and re-ranked predictor row."""
        p = rerank(smooth.reindex(list(model.stock_ids)).to_numpy(dtype=float))
        if np.isnan(p).any():
            raise DegenerateError("smoothed predictor is undefined on part of the model's stocks")
        port = build_markowitz(Predictor(date, model.stock_ids, p), model)
        return Portfolio(port.stock_ids, port.x, f"costaware:k={model.k}", date)


def build_cost_aware(
    predictor_history: pd.DataFrame,
    model: SpectralCovariance,
    cost_rate: float,
    halflife_grid: Sequence[float] = DEFAULT_HALFLIFE_GRID,
    *,
    calibration: tuple[pd.DataFrame, pd.DataFrame, Sequence[SpectralCovariance]] | None = None,
) -> Portfolio:
    """One-shot cost-aware portfolio for the last row of ``predictor_history``.

    ``calibration`` holds (predictors, next-day returns, models) for a window
    ending strictly before that row.
    """
    scheme = CostAwareMarkowitz(k=model.k, grid=tuple(halflife_grid))
    if calibration is None:
        raise ParameterError("build_cost_aware needs a calibration window (predictors, returns, models)")
    preds, rets, models = calibration
    if len(preds) and preds.index[-1] >= predictor_history.index[-1]:
        raise ParameterError("calibration window must end strictly before the construction date")
    scheme.calibrate(preds, rets, models, cost_rate)
    return scheme.build(predictor_history, model)


@dataclass(frozen=True)
class SchemeSpec:
    name: str
    k: int | None = None

    @property
    def label(self) -> str:
        return self.name if self.k is None else f"{self.name}:k={self.k}"

    @property
    def needs_model(self) -> bool:
        return self.name in ("betaopt", "markowitz", "costaware")


_SCHEME_RE = re.compile(r"^(markowitz|costaware)(?::k=(\d+))?$")
SCHEME_IDS = ("ff", "neutral", "beta", "betaopt", "markowitz:k=<int>", "costaware:k=<int>")


def parse_scheme(text: str, default_k: int = 5, k_bounds: tuple[int, int] = (1, 5)) -> SchemeSpec:
    s = text.strip().lower()
    if s in ("ff", "neutral", "beta", "betaopt"):
        return SchemeSpec(s, default_k if s == "betaopt" else None)
    m = _SCHEME_RE.match(s)
    if not m:
        raise ConfigError(f"unknown scheme {text!r}; valid ids: {', '.join(SCHEME_IDS)}")
    k = int(m.group(2)) if m.group(2) else default_k
    lo, hi = k_bounds
    if not lo <= k <= hi:
        raise ConfigError(f"scheme {text!r}: k={k} outside the allowed range [{lo}, {hi}]")
    return SchemeSpec(m.group(1), k)
