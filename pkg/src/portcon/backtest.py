"""Daily-rebalanced pool backtests, linear costs, world-wide aggregation, risk targeting.

Conventions: the target portfolio is decided with data through the close of
day t, traded at that close, and earns the t -> t+1 return, credited on day
t+1. P&L is the simple sum of daily P&L on unit-gross weights (no
compounding), so the position vector is not drifted between rebalances.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .construction import (
    DEFAULT_HALFLIFE_GRID,
    CostAwareMarkowitz,
    IndexWeights,
    SchemeSpec,
    build_beta,
    build_betaopt,
    build_ff,
    build_markowitz,
    build_neutral,
    calibration_score,
    ema_update,
    parse_scheme,
    rerank,
)
from .covariance import SpectralCovariance, apply_inverse, compute_beta, estimate_correlation, fit_model
from .data import TRADING_DAYS, MarketPanel, Universe
from .errors import ComputationError, ConfigError, DataError, DegenerateError, RescalingError, WarmupError
from .signals import Predictor, compute_raw_signal, get_factor

__all__ = [
    "BacktestResult",
    "CostParams",
    "ModelConfig",
    "PoolBacktest",
    "aggregate_worldwide",
    "normalize_risk",
    "run_pool_backtest",
]

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("date", "pre_cost_pnl", "cost", "net_pnl", "turnover", "gross", "net_exposure")


@dataclass(frozen=True)
class CostParams:
    commission_bps: float = 1.0
    half_spread_bps: float = 5.0

    def __post_init__(self) -> None:
        if self.commission_bps < 0 or self.half_spread_bps < 0:
            raise ConfigError("cost parameters must be non-negative")

    @property
    def rate(self) -> float:
        """Cost per traded dollar."""
        return (self.commission_bps + self.half_spread_bps) * 1e-4


@dataclass(frozen=True)
class ModelConfig:
    window: int = 500
    k: int = 5
    refit_every: int = 21
    beta_window: int = 252
    min_obs: int = 60
    calibration_days: int = 252
    recalibrate_every: int = 252
    halflife_grid: tuple[float, ...] = DEFAULT_HALFLIFE_GRID

    def __post_init__(self) -> None:
        if self.refit_every < 1 or self.window < 2 or self.k < 1:
            raise ConfigError("model config needs refit_every >= 1, window >= 2 and k >= 1")


@dataclass
class BacktestResult:
    """Daily series of one strategy. Row ``d`` holds the P&L earned from d-1 to d
    and the trades made at the close of d."""

    pool: str
    scheme: str
    factor: str
    dates: pd.DatetimeIndex
    pre_cost_pnl: np.ndarray
    commission: np.ndarray
    spread_cost: np.ndarray
    turnover: np.ndarray
    gross: np.ndarray
    net_exposure: np.ndarray
    beta_exposure: np.ndarray
    index_returns: np.ndarray
    positions: pd.DataFrame | None = None
    notes: list[str] = field(default_factory=list)
    halflives: dict = field(default_factory=dict)
    scale: float = 1.0

    @property
    def costs(self) -> np.ndarray:
        return self.commission + self.spread_cost

    @property
    def net_pnl(self) -> np.ndarray:
        return self.pre_cost_pnl - self.costs

    def __len__(self) -> int:
        return len(self.dates)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "date": self.dates.strftime("%Y-%m-%d"),
                "pre_cost_pnl": self.pre_cost_pnl,
                "cost": self.costs,
                "net_pnl": self.net_pnl,
                "turnover": self.turnover,
                "gross": self.gross,
                "net_exposure": self.net_exposure,
            },
            columns=list(RESULT_COLUMNS),
        )

    def write_csv(self, path: str | Path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.12g", lineterminator="\n")

    def scaled(self, c: float) -> "BacktestResult":
        return replace(
            self,
            pre_cost_pnl=self.pre_cost_pnl * c,
            commission=self.commission * c,
            spread_cost=self.spread_cost * c,
            turnover=self.turnover * c,
            gross=self.gross * c,
            net_exposure=self.net_exposure * c,
            beta_exposure=self.beta_exposure * c,
            positions=None if self.positions is None else self.positions * c,
            notes=list(self.notes),
            scale=self.scale * c,
        )

    def pnl_series(self, net: bool = True) -> pd.Series:
        return pd.Series(self.net_pnl if net else self.pre_cost_pnl, index=self.dates, name=self.scheme)


class PoolBacktest:
    """Day-by-day simulation of one (pool, factor, scheme).

    Covariance models and regression betas are refitted on a fixed grid of
    anchor rows every ``refit_every`` days (and whenever the stock set
    changes), using returns strictly before the anchor.
    """

    def __init__(
        self,
        panel: MarketPanel,
        universe: Universe,
        scheme: SchemeSpec | str,
        factor: str,
        model_config: ModelConfig | None = None,
        cost_params: CostParams | None = None,
    ):
        self.panel = panel
        self.universe = universe
        self.cfg = model_config or ModelConfig()
        self.scheme = parse_scheme(scheme, default_k=self.cfg.k, k_bounds=(1, 10**6)) if isinstance(scheme, str) else scheme
        self.factor = get_factor(factor)
        self.costs = cost_params or CostParams()
        self.notes: list[str] = []
        self._raw: dict[int, np.ndarray] = {}
        self._models: dict[tuple, SpectralCovariance] = {}
        self._betas: dict[tuple, np.ndarray] = {}
        self._caps = pd.DataFrame(panel.market_cap).ffill().to_numpy()
        self._members: dict[pd.Period, np.ndarray] = {}
        self._quarter = panel.dates.to_period("Q")
        self.halflives: dict[str, float] = {}
        self._rows: dict[int, tuple[np.ndarray, SpectralCovariance | None]] = {}
        self._states: dict[float, np.ndarray] = {}
        self._last_cal: int | None = None
        if self.scheme.name == "costaware":
            self._cost_aware = CostAwareMarkowitz(k=self.scheme.k, grid=tuple(self.cfg.halflife_grid))

    # -- cached inputs -------------------------------------------------------

    def _anchor(self, t: int) -> int:
        return t - t % self.cfg.refit_every

    def members_mask(self, t: int) -> np.ndarray:
        q = self._quarter[t]
        if q not in self._members:
            ids = self.universe.members_at(self.panel.dates[t])
            mask = np.zeros(self.panel.n_stocks, dtype=bool)
            if ids:
                mask[self.panel.columns(ids)] = True
            self._members[q] = mask
        return self._members[q]

    def raw_signal(self, t: int) -> np.ndarray:
        if t not in self._raw:
            try:
                self._raw[t] = compute_raw_signal(self.factor.name, self.panel, t).values
            except WarmupError:
                self._raw[t] = np.full(self.panel.n_stocks, np.nan)
        return self._raw[t]

    def candidates(self, t: int) -> np.ndarray:
        """Universe members tradable at t with a defined raw signal."""
        return self.members_mask(t) & self.panel.present[t] & ~np.isnan(self.raw_signal(t))

    def model(self, t: int, cols: np.ndarray) -> SpectralCovariance:
        anchor = self._anchor(t)
        key = (anchor, cols.tobytes())
        if key not in self._models:
            ids = [self.panel.stock_ids[j] for j in cols]
            est = estimate_correlation(self.panel, ids, anchor, window=self.cfg.window, min_obs=self.cfg.min_obs)
            if est.excluded:
                self.notes.append(f"{self.panel.dates[anchor].date()}: excluded from covariance: {', '.join(est.excluded)}")
            k = min(self.scheme.k or self.cfg.k, len(est.stock_ids) - 1)
            self._models[key] = fit_model(est, k)
        return self._models[key]

    def betas(self, t: int, cols: np.ndarray) -> np.ndarray:
        anchor = self._anchor(t)
        key = (anchor, cols.tobytes())
        if key not in self._betas:
            ids = [self.panel.stock_ids[j] for j in cols]
            try:
                self._betas[key] = compute_beta(self.panel, ids, anchor, "regression", self.cfg.beta_window).beta
            except (WarmupError, ComputationError):
                self._betas[key] = np.full(len(cols), np.nan)
        return self._betas[key]

    def quarter_caps(self, t: int, cols: np.ndarray) -> np.ndarray:
        start = int(self.panel.dates.searchsorted(self._quarter[t].start_time, side="left"))
        return self._caps[max(start - 1, 0), cols]

    # -- portfolio at one date -----------------------------------------------

    def support(self, t: int) -> tuple[np.ndarray, SpectralCovariance | None, np.ndarray | None]:
        """Stock columns the scheme can trade at t, with its model or betas."""
        cols = np.flatnonzero(self.candidates(t))
        if len(cols) < 2:
            raise DegenerateError(f"{len(cols)} stocks with a signal")
        model = beta = None
        if self.scheme.needs_model:
            model = self.model(t, cols)
            if len(model.stock_ids) != len(cols):
                cols = self.panel.columns(model.stock_ids)
        elif self.scheme.name == "beta":
            b = self.betas(t, cols)
            ok = np.isfinite(b)
            cols, beta = cols[ok], b[ok]
        return cols, model, beta

    def predictor(self, t: int, cols: np.ndarray) -> Predictor:
        vals = self.raw_signal(t)[cols]
        if self.factor.direction == "descending":
            vals = -vals
        ids = tuple(self.panel.stock_ids[j] for j in cols)
        return Predictor(self.panel.dates[t], ids, rerank(vals))

    def predictor_row(self, t: int) -> tuple[np.ndarray, SpectralCovariance | None]:
        """Full-width predictor (NaN off support) and the model used on the support."""
        row = np.full(self.panel.n_stocks, np.nan)
        try:
            cols, model, _ = self.support(t)
        except (DegenerateError, WarmupError):
            return row, None
        row[cols] = self.predictor(t, cols).p
        return row, model

    def target(self, t: int, smooth: np.ndarray | None = None) -> np.ndarray:
        x = np.zeros(self.panel.n_stocks)
        cols, model, beta = self.support(t)
        pred = self.predictor(t, cols)
        name = self.scheme.name
        if name == "ff":
            port = build_ff(pred, self._caps[t, cols])
        elif name == "neutral":
            port = build_neutral(pred)
        elif name == "beta":
            try:
                port = build_beta(pred, beta)
            except RescalingError as exc:
                self.notes.append(f"{self.panel.dates[t].date()}: beta fallback to neutral ({exc})")
                log.warning("beta rescaling failed on %s: %s", self.panel.dates[t].date(), exc)
                port = build_neutral(pred)
        elif name == "betaopt":
            w = IndexWeights.from_caps(pred.stock_ids, self.quarter_caps(t, cols))
            port = build_betaopt(pred, model, w)
        elif name == "markowitz":
            port = build_markowitz(pred, model)
        elif name == "costaware":
            s = pd.Series(smooth[cols], index=list(pred.stock_ids))
            port = self._cost_aware.build_smoothed(s, model, pred.date)
        else:  # pragma: no cover - parse_scheme rejects anything else
            raise DataError(f"unsupported scheme {name}")
        x[cols] = port.x
        return x

    def beta_exposure(self, t: int, x: np.ndarray) -> float:
        held = np.flatnonzero(x)
        if not len(held):
            return 0.0
        cols = np.flatnonzero(self.candidates(t))
        b = np.full(self.panel.n_stocks, np.nan)
        b[cols] = self.betas(t, cols)
        if not np.isfinite(b[held]).any():
            return math.nan
        return float(np.nansum(x[held] * b[held]))

    # -- warm-up -------------------------------------------------------------

    def required_start(self) -> int:
        cfg = self.cfg
        first_universe = int(self.panel.dates.searchsorted(self.universe.quarters[0].start_time, side="left"))
        need = max(first_universe, self.factor.history, 1)

        def anchored(n: int) -> int:
            # first row whose anchor has at least n rows of history
            return -(-n // cfg.refit_every) * cfg.refit_every

        if self.scheme.needs_model:
            need = max(need, anchored(cfg.window))
        if self.scheme.name == "beta":
            need = max(need, anchored(cfg.beta_window))
        if self.scheme.name == "costaware":
            need += cfg.calibration_days
        return need

    # -- simulation ----------------------------------------------------------

    def _row(self, t: int) -> tuple[np.ndarray, SpectralCovariance | None]:
        if t not in self._rows:
            self._rows[t] = self.predictor_row(t)
        return self._rows[t]

    def _calibrate(self, t: int) -> float:
        """Pick the halflife on decision rows [t - calibration_days, t)."""
        cfg, panel = self.cfg, self.panel
        if cfg.calibration_days < 2:
            raise WarmupError("cost-aware calibration needs at least 2 days")
        window = range(t - cfg.calibration_days, t)
        rate = self.costs.rate
        if rate == 0:
            self._cost_aware.halflife = self._cost_aware.grid[0]
            return self._cost_aware.halflife
        scores = {}
        for h in self._cost_aware.grid:
            state = np.full(panel.n_stocks, np.nan)
            prev = np.zeros(panel.n_stocks)
            pnl, cost = [], []
            for s in window:
                p, model = self._row(s)
                state = ema_update(state, p, h)
                x = np.zeros(panel.n_stocks)
                if model is not None:
                    cols = panel.columns(model.stock_ids)
                    q = rerank(state[cols])
                    if not np.isnan(q).any():
                        v = apply_inverse(model, q)
                        x[cols] = v / np.abs(v).sum()
                pnl.append(float(x @ np.nan_to_num(panel.total_return[s + 1])))
                cost.append(rate * float(np.abs(x - prev).sum()))
                prev = x
            scores[h] = calibration_score(np.array(pnl), np.array(cost))
        best = max(self._cost_aware.grid, key=lambda h: (scores[h], -h))
        self._cost_aware.halflife, self._cost_aware.scores = best, scores
        return best

    def _smoothed(self, t: int) -> np.ndarray:
        """Advance the per-halflife averages to row t and return the selected one."""
        cfg, N = self.cfg, self.panel.n_stocks
        if self._last_cal is None or t - self._last_cal >= cfg.recalibrate_every:
            h = self._calibrate(t)
            self.halflives[str(self.panel.dates[t].date())] = h
            self._last_cal = t
        if not self._states:
            self._states = {g: np.full(N, np.nan) for g in (0.0, *self._cost_aware.grid)}
            for s in range(t - cfg.calibration_days, t):
                for g in self._states:
                    self._states[g] = ema_update(self._states[g], self._row(s)[0], g)
        p_row = self._row(t)[0]
        for g in self._states:
            self._states[g] = ema_update(self._states[g], p_row, g)
        for s in [s for s in self._rows if s < t - cfg.calibration_days]:
            del self._rows[s]
        return self._states[self._cost_aware.halflife]

    def run(self, start=None, end=None) -> BacktestResult:
        panel, cfg = self.panel, self.cfg
        need = self.required_start()
        s0 = need if start is None else max(int(panel.dates.searchsorted(pd.Timestamp(start))), 0)
        e0 = panel.n_days - 1 if end is None else int(panel.dates.searchsorted(pd.Timestamp(end), side="right")) - 1
        if s0 < need:
            self.notes.append(f"start date adjusted from {panel.dates[s0].date()} to {panel.dates[min(need, panel.n_days - 1)].date()} for warm-up")
            s0 = need
        if s0 > e0:
            raise WarmupError(
                f"{panel.name}/{self.factor.name}/{self.scheme.label}: warm-up needs {need} rows, panel has {panel.n_days} up to the end date"
            )

        rows = range(s0, e0 + 1)
        n, N = len(rows), panel.n_stocks
        out = {k: np.zeros(n) for k in ("pnl", "comm", "spread", "turn", "gross", "net", "beta")}
        positions = np.zeros((n, N))
        prev = np.zeros(N)
        flat_days = 0
        missing_ret = 0

        for i, t in enumerate(rows):
            r = panel.total_return[t]
            held = prev != 0
            bad = held & np.isnan(r)
            missing_ret += int(bad.sum())
            out["pnl"][i] = float(np.where(held & ~bad, prev * np.nan_to_num(r), 0.0).sum())

            smooth = self._smoothed(t) if self.scheme.name == "costaware" else None
            try:
                x = self.target(t, smooth)
            except (DegenerateError, WarmupError) as exc:
                flat_days += 1
                if flat_days <= 3:
                    self.notes.append(f"{panel.dates[t].date()}: flat ({exc})")
                x = np.zeros(N)
            trade = np.abs(x - prev).sum()
            out["turn"][i] = trade
            out["comm"][i] = self.costs.commission_bps * 1e-4 * trade
            out["spread"][i] = self.costs.half_spread_bps * 1e-4 * trade
            out["gross"][i] = np.abs(x).sum()
            out["net"][i] = x.sum()
            out["beta"][i] = self.beta_exposure(t, x)
            positions[i] = x
            prev = x

        if flat_days:
            self.notes.append(f"{flat_days} day(s) without a valid portfolio held flat")
        if missing_ret:
            self.notes.append(f"{missing_ret} position-day(s) with a missing return earned zero")
        dates = panel.dates[s0 : e0 + 1]
        return BacktestResult(
            pool=panel.name,
            scheme=self.scheme.label,
            factor=self.factor.name,
            dates=dates,
            pre_cost_pnl=out["pnl"],
            commission=out["comm"],
            spread_cost=out["spread"],
            turnover=out["turn"],
            gross=out["gross"],
            net_exposure=out["net"],
            beta_exposure=out["beta"],
            index_returns=np.array(panel.index_returns[s0 : e0 + 1]),
            positions=pd.DataFrame(positions, index=dates, columns=list(panel.stock_ids)),
            notes=list(self.notes),
            halflives=dict(self.halflives),
        )


def run_pool_backtest(
    panel: MarketPanel,
    universe: Universe,
    scheme: SchemeSpec | str,
    factor: str,
    model_config: ModelConfig | None = None,
    cost_params: CostParams | None = None,
    *,
    start=None,
    end=None,
) -> BacktestResult:
    return PoolBacktest(panel, universe, scheme, factor, model_config, cost_params).run(start, end)


def aggregate_worldwide(results: Sequence[BacktestResult], weights: Sequence[float] | None = None) -> BacktestResult:
    """Average pools date by date over the pools that have that date.

    Flat average by default; ``weights`` (one per pool, e.g. total market cap)
    gives a weighted average renormalised over the pools present.
    """
    if not results:
        raise DataError("aggregate_worldwide needs at least one pool result")
    if len(results) == 1 and weights is None:
        r = results[0]
        return replace(r, notes=list(r.notes))
    dates = results[0].dates
    for r in results[1:]:
        dates = dates.union(r.dates)
    w = np.ones(len(results)) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (len(results),) or np.any(w < 0):
        raise DataError("one non-negative weight per pool is required")

    def combine(attr: str) -> np.ndarray:
        stack = np.full((len(results), len(dates)), np.nan)
        for j, r in enumerate(results):
            stack[j, dates.get_indexer(r.dates)] = getattr(r, attr)
        have = ~np.isnan(stack)
        ww = np.where(have, w[:, None], 0.0)
        tot = ww.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            if weights is None:
                res = np.nansum(stack, axis=0) / have.sum(axis=0)
            else:
                res = np.nansum(np.where(have, stack, 0.0) * ww, axis=0) / tot
        return res

    first = results[0]
    return BacktestResult(
        pool="world",
        scheme=first.scheme,
        factor=first.factor,
        dates=dates,
        pre_cost_pnl=combine("pre_cost_pnl"),
        commission=combine("commission"),
        spread_cost=combine("spread_cost"),
        turnover=combine("turnover"),
        gross=combine("gross"),
        net_exposure=combine("net_exposure"),
        beta_exposure=combine("beta_exposure"),
        index_returns=combine("index_returns"),
        positions=None,
        notes=[f"{r.pool}: {n}" for r in results for n in r.notes],
        halflives={r.pool: r.halflives for r in results if r.halflives},
    )


def annualized_vol(pnl: np.ndarray) -> float:
    return float(np.std(pnl, ddof=1)) * math.sqrt(TRADING_DAYS)


def normalize_risk(
    results: Sequence[BacktestResult],
    target: float = 0.10,
    *,
    net: bool = True,
    min_days: int = TRADING_DAYS,
) -> list[BacktestResult]:
    """Rescale each result so its full-period annualised P&L volatility equals ``target``."""
    out = []
    for r in results:
        pnl = r.net_pnl if net else r.pre_cost_pnl
        if len(pnl) <= min_days:
            raise DataError(f"{r.scheme}: risk normalisation needs more than {min_days} days of P&L, got {len(pnl)}")
        vol = annualized_vol(pnl)
        if not vol > 0:
            raise DegenerateError(f"{r.scheme}: P&L has zero variance")
        out.append(r.scaled(target / vol))
    return out
