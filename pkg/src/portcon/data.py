"""Market data: CSV ingestion, synthetic factor-model panels, liquidity universes.

Missing cells are NaN throughout and any quantity derived from a NaN stays NaN.
Panels are immutable: every array is flagged read-only at construction.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError, DuplicationError, OrderingError, SchemaError, WarmupError

__all__ = [
    "ADV_WINDOW",
    "FUNDAMENTAL_FIELDS",
    "PRICE_COLUMNS",
    "MarketPanel",
    "SyntheticSpec",
    "Universe",
    "generate_synthetic",
    "load_panel",
    "select_universe",
    "write_panel_csv",
]

ADV_WINDOW = 63
TRADING_DAYS = 252

PRICE_COLUMNS = ("date", "stock_id", "close", "total_return", "market_cap", "adv", "sector")
FUNDAMENTAL_COLUMNS = ("report_date", "stock_id", "field", "value")
FUNDAMENTAL_FIELDS = (
    "net_operating_assets",
    "total_assets",
    "total_equity",
    "operating_cash_flow",
    "dividends",
    "net_income",
)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MarketPanel:
    """Aligned daily panel for one pool of stocks.

    Matrices are shaped ``(n_days, n_stocks)``. ``alpha`` holds the latent
    signal of a synthetic panel (None for real data).
    """

    dates: pd.DatetimeIndex
    stock_ids: tuple[str, ...]
    close: np.ndarray
    total_return: np.ndarray
    market_cap: np.ndarray
    adv: np.ndarray
    sector: tuple[str, ...]
    fundamentals: pd.DataFrame = field(
        default_factory=lambda: pd.DataFrame(columns=list(FUNDAMENTAL_COLUMNS))
    )
    alpha: np.ndarray | None = None
    name: str = "pool"

    def __post_init__(self) -> None:
        dates = pd.DatetimeIndex(self.dates)
        if not dates.is_monotonic_increasing or dates.has_duplicates:
            raise OrderingError("panel dates must be strictly increasing")
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "stock_ids", tuple(str(s) for s in self.stock_ids))
        object.__setattr__(self, "sector", tuple(str(s) for s in self.sector))
        shape = (len(dates), len(self.stock_ids))
        for name in ("close", "total_return", "market_cap", "adv"):
            arr = _frozen(getattr(self, name))
            if arr.shape != shape:
                raise SchemaError(f"{name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)
        if self.alpha is not None:
            alpha = _frozen(self.alpha)
            if alpha.shape != shape:
                raise SchemaError(f"alpha has shape {alpha.shape}, expected {shape}")
            object.__setattr__(self, "alpha", alpha)
        if len(self.sector) != shape[1]:
            raise SchemaError("one sector label per stock is required")
        if len(set(self.stock_ids)) != shape[1]:
            raise DuplicationError("stock ids must be unique")
        cap = self.market_cap[~np.isnan(self.market_cap)]
        if np.any(cap <= 0):
            raise DataError("market_cap must be positive where present")
        adv = self.adv[~np.isnan(self.adv)]
        if np.any(adv < 0):
            raise DataError("adv must be non-negative where present")

    @property
    def n_days(self) -> int:
        return len(self.dates)

    @property
    def n_stocks(self) -> int:
        return len(self.stock_ids)

    @cached_property
    def present(self) -> np.ndarray:
        """True where a close price is available (the stock is tradable)."""
        return ~np.isnan(self.close)

    @cached_property
    def stock_index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.stock_ids)}

    def columns(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self.stock_index[s] for s in ids], dtype=int)

    def date_index(self, date) -> int:
        """Position of ``date`` in the panel; raises KeyError if absent."""
        return int(self.dates.get_loc(pd.Timestamp(date)))

    @cached_property
    def _fundamental_tables(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        tables = {}
        f = self.fundamentals
        if f is None or len(f) == 0:
            return tables
        for name, sub in f.groupby("field"):
            wide = (
                sub.pivot_table(index="report_date", columns="stock_id", values="value", aggfunc="last")
                .reindex(columns=list(self.stock_ids))
                .sort_index()
                .ffill()
            )
            tables[name] = (wide.index.values.astype("datetime64[ns]"), wide.to_numpy(dtype=float))
        return tables

    def fundamental_asof(self, name: str, date) -> np.ndarray:
        """Latest reported value per stock with report date strictly before ``date``."""
        out = np.full(self.n_stocks, np.nan)
        table = self._fundamental_tables.get(name)
        if table is None:
            return out
        report_dates, values = table
        row = int(np.searchsorted(report_dates, np.datetime64(pd.Timestamp(date), "ns"), side="left")) - 1
        if row >= 0:
            out[:] = values[row]
        return out

    def truncate(self, last_date) -> "MarketPanel":
        """Panel restricted to dates <= ``last_date`` (and fundamentals reported by then)."""
        last = pd.Timestamp(last_date)
        n = int(self.dates.searchsorted(last, side="right"))
        f = self.fundamentals
        if f is not None and len(f):
            f = f[f["report_date"] <= last].reset_index(drop=True)
        return MarketPanel(
            dates=self.dates[:n],
            stock_ids=self.stock_ids,
            close=self.close[:n],
            total_return=self.total_return[:n],
            market_cap=self.market_cap[:n],
            adv=self.adv[:n],
            sector=self.sector,
            fundamentals=f,
            alpha=None if self.alpha is None else self.alpha[:n],
            name=self.name,
        )

    @cached_property
    def index_returns(self) -> np.ndarray:
        """Daily return of the market-cap weighted index over all stocks.

        Weights are the previous day's caps over stocks with a return today.
        The first day is NaN.
        """
        r = self.total_return
        cap_prev = np.vstack([np.full((1, self.n_stocks), np.nan), self.market_cap[:-1]])
        ok = ~np.isnan(r) & ~np.isnan(cap_prev)
        w = np.where(ok, cap_prev, 0.0)
        tot = w.sum(axis=1)
        num = np.where(ok, r, 0.0) * w
        with np.errstate(invalid="ignore", divide="ignore"):
            out = num.sum(axis=1) / tot
        out[tot <= 0] = np.nan
        out.setflags(write=False)
        return out


def _returns_from_closes(close: np.ndarray, given: np.ndarray) -> np.ndarray:
    """Returns at t need closes at t-1 and t; given values win where defined."""
    out = np.full_like(close, np.nan)
    if len(close) < 2:
        return out
    prev, cur = close[:-1], close[1:]
    both = ~np.isnan(prev) & ~np.isnan(cur)
    with np.errstate(invalid="ignore", divide="ignore"):
        implied = cur / prev - 1.0
    g = given[1:]
    out[1:] = np.where(both, np.where(np.isnan(g), implied, g), np.nan)
    return out


def _parse_float(text: str, line: int, column: str, path: Path) -> float:
    text = text.strip()
    if text == "" or text.upper() in ("NA", "NAN"):
        return math.nan
    try:
        v = float(text)
    except ValueError:
        raise SchemaError(f"{path}:{line}: column {column!r}: cannot parse {text!r} as a number") from None
    if not math.isfinite(v):
        raise SchemaError(f"{path}:{line}: column {column!r}: non-finite value {text!r}")
    return v


def _parse_date(text: str, line: int, column: str, path: Path) -> pd.Timestamp:
    try:
        return pd.Timestamp(text.strip())
    except (ValueError, TypeError):
        raise SchemaError(f"{path}:{line}: column {column!r}: cannot parse {text!r} as an ISO-8601 date") from None


def _read_rows(path: Path, expected: Sequence[str]) -> list[tuple[int, dict[str, str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in expected if c not in header]
        extra = [c for c in header if c not in expected]
        if missing or extra:
            raise SchemaError(
                f"{path}: malformed header {header}; expected columns {list(expected)}"
                + (f", missing {missing}" if missing else "")
                + (f", unexpected {extra}" if extra else "")
            )
        reader.fieldnames = header
        rows = []
        for row in reader:
            if None in row or any(v is None for v in row.values()):
                raise SchemaError(f"{path}:{reader.line_num}: wrong number of fields")
            rows.append((reader.line_num, row))
    return rows


def load_panel(
    path: str | Path,
    fundamentals_path: str | Path | None = None,
    *,
    name: str | None = None,
) -> MarketPanel:
    """Read a long-format prices CSV (and optional fundamentals CSV) into a panel.

    Rows must be ordered by date (non-decreasing); within a date any stock order
    is accepted. Empty numeric cells mark missing data.
    """
    path = Path(path)
    rows = _read_rows(path, PRICE_COLUMNS)
    if not rows:
        raise SchemaError(f"{path}: no data rows")

    records = []
    seen: dict[tuple[pd.Timestamp, str], int] = {}
    sectors: dict[str, str] = {}
    last_date = None
    for line, row in rows:
        d = _parse_date(row["date"], line, "date", path)
        sid = row["stock_id"].strip()
        if not sid:
            raise SchemaError(f"{path}:{line}: empty stock_id")
        if last_date is not None and d < last_date:
            raise OrderingError(f"{path}:{line}: date {d.date()} precedes {last_date.date()} on an earlier row")
        last_date = d
        key = (d, sid)
        if key in seen:
            raise DuplicationError(f"{path}:{line}: duplicate (date, stock_id) = ({d.date()}, {sid}), first seen at line {seen[key]}")
        seen[key] = line
        sec = row["sector"].strip()
        if sid in sectors and sec and sectors[sid] != sec:
            raise SchemaError(f"{path}:{line}: stock {sid} changes sector from {sectors[sid]!r} to {sec!r}")
        if sec:
            sectors.setdefault(sid, sec)
        vals = {c: _parse_float(row[c], line, c, path) for c in ("close", "total_return", "market_cap", "adv")}
        if not math.isnan(vals["market_cap"]) and vals["market_cap"] <= 0:
            raise DataError(f"{path}:{line}: market_cap must be positive, got {vals['market_cap']}")
        if not math.isnan(vals["adv"]) and vals["adv"] < 0:
            raise DataError(f"{path}:{line}: adv must be non-negative, got {vals['adv']}")
        if not math.isnan(vals["close"]) and vals["close"] <= 0:
            raise DataError(f"{path}:{line}: close must be positive, got {vals['close']}")
        records.append((d, sid, vals))

    dates = pd.DatetimeIndex(sorted({r[0] for r in records}))
    stock_ids = tuple(sorted({r[1] for r in records}))
    di = {d: i for i, d in enumerate(dates)}
    si = {s: j for j, s in enumerate(stock_ids)}
    mats = {c: np.full((len(dates), len(stock_ids)), np.nan) for c in ("close", "total_return", "market_cap", "adv")}
    for d, sid, vals in records:
        for c, v in vals.items():
            mats[c][di[d], si[sid]] = v

    fundamentals = pd.DataFrame(columns=list(FUNDAMENTAL_COLUMNS))
    if fundamentals_path is not None:
        fundamentals = _load_fundamentals(Path(fundamentals_path), set(stock_ids))

    return MarketPanel(
        dates=dates,
        stock_ids=stock_ids,
        close=mats["close"],
        total_return=_returns_from_closes(mats["close"], mats["total_return"]),
        market_cap=mats["market_cap"],
        adv=mats["adv"],
        sector=tuple(sectors.get(s, "unknown") for s in stock_ids),
        fundamentals=fundamentals,
        name=name or path.stem,
    )


def _load_fundamentals(path: Path, known: set[str]) -> pd.DataFrame:
    rows = _read_rows(path, FUNDAMENTAL_COLUMNS)
    out = []
    seen: dict[tuple, int] = {}
    for line, row in rows:
        d = _parse_date(row["report_date"], line, "report_date", path)
        sid = row["stock_id"].strip()
        fld = row["field"].strip()
        if fld not in FUNDAMENTAL_FIELDS:
            raise SchemaError(f"{path}:{line}: unknown field {fld!r}; expected one of {list(FUNDAMENTAL_FIELDS)}")
        if sid not in known:
            raise DataError(f"{path}:{line}: stock_id {sid!r} does not appear in the prices file")
        key = (d, sid, fld)
        if key in seen:
            raise DuplicationError(f"{path}:{line}: duplicate (report_date, stock_id, field), first seen at line {seen[key]}")
        seen[key] = line
        v = _parse_float(row["value"], line, "value", path)
        if math.isnan(v):
            continue
        out.append((d, sid, fld, v))
    df = pd.DataFrame(out, columns=list(FUNDAMENTAL_COLUMNS))
    return df.sort_values(["report_date", "stock_id", "field"], kind="mergesort").reset_index(drop=True)


def write_panel_csv(panel: MarketPanel, prices_path: str | Path, fundamentals_path: str | Path | None = None) -> None:
    """Write a panel in the ingestion format; ``load_panel`` reads it back."""
    n_days, n_stocks = panel.close.shape
    ids = np.array(panel.stock_ids)
    df = pd.DataFrame(
        {
            "date": np.repeat(panel.dates.strftime("%Y-%m-%d").to_numpy(), n_stocks),
            "stock_id": np.tile(ids, n_days),
            "close": panel.close.ravel(),
            "total_return": panel.total_return.ravel(),
            "market_cap": panel.market_cap.ravel(),
            "adv": panel.adv.ravel(),
            "sector": np.tile(np.array(panel.sector), n_days),
        }
    )
    df.to_csv(prices_path, index=False, float_format="%.17g", lineterminator="\n")
    if fundamentals_path is not None:
        f = panel.fundamentals.copy()
        f["report_date"] = pd.to_datetime(f["report_date"]).dt.strftime("%Y-%m-%d")
        f[list(FUNDAMENTAL_COLUMNS)].to_csv(fundamentals_path, index=False, float_format="%.17g", lineterminator="\n")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic factor-model panel.

    Returns follow ``r_it = beta_i * f_mkt + f_sector(i) + eta_it`` with an
    optional ``embedded_alpha * idio_daily_vol * a_i,t-1`` term coupling
    returns to a latent AR(1) signal ``a`` whose persistence is set by
    ``alpha_halflife`` days. Volatilities are annualised.
    ``sector_vol_spread`` tilts sector volatilities linearly from
    ``(1 + spread)`` to ``(1 - spread)`` times ``sector_vol`` so the sector
    eigenvalues separate.
    """

    n_stocks: int = 100
    n_days: int = 1500
    n_sectors: int = 4
    market_vol: float = 0.16
    sector_vol: float = 0.10
    idio_vol: float = 0.25
    market_beta_dispersion: float = 0.25
    embedded_alpha: float = 0.0
    alpha_halflife: float = 20.0
    sector_vol_spread: float = 0.0
    seed: int = 0
    start_date: str = "2000-01-03"

    def __post_init__(self) -> None:
        if self.n_stocks < 2 or self.n_days < 2:
            raise ConfigError("synthetic panel needs at least 2 stocks and 2 days")
        if self.n_sectors < 1:
            raise ConfigError("n_sectors must be >= 1")
        for name in ("market_vol", "sector_vol", "idio_vol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.market_beta_dispersion < 0:
            raise ConfigError("market_beta_dispersion must be >= 0")
        if self.alpha_halflife <= 0:
            raise ConfigError("alpha_halflife must be > 0")
        if not 0 <= self.sector_vol_spread < 1:
            raise ConfigError("sector_vol_spread must lie in [0, 1)")


def generate_synthetic(spec: SyntheticSpec, name: str | None = None) -> MarketPanel:
    rng = np.random.default_rng(spec.seed)
    T, N, G = spec.n_days, spec.n_stocks, spec.n_sectors
    scale = 1.0 / math.sqrt(TRADING_DAYS)

    beta = 1.0 + spec.market_beta_dispersion * rng.standard_normal(N)
    groups = np.arange(N) % G
    if G > 1:
        tilt = np.linspace(1.0 + spec.sector_vol_spread, 1.0 - spec.sector_vol_spread, G)
    else:
        tilt = np.ones(1)
    f_mkt = spec.market_vol * scale * rng.standard_normal(T)
    f_sec = spec.sector_vol * scale * tilt * rng.standard_normal((T, G))
    idio = spec.idio_vol * scale
    eta = idio * rng.standard_normal((T, N))
    r = beta[None, :] * f_mkt[:, None] + f_sec[:, groups] + eta

    alpha = None
    if spec.embedded_alpha:
        phi = 2.0 ** (-1.0 / spec.alpha_halflife)
        shocks = rng.standard_normal((T, N))
        alpha = np.empty((T, N))
        alpha[0] = shocks[0]
        innov = math.sqrt(1.0 - phi * phi)
        for t in range(1, T):
            alpha[t] = phi * alpha[t - 1] + innov * shocks[t]
        r[1:] += spec.embedded_alpha * idio * alpha[:-1]

    p0 = np.exp(rng.normal(math.log(50.0), 0.5, N))
    r[0] = np.nan
    growth = np.vstack([np.ones((1, N)), 1.0 + r[1:]])
    close = p0[None, :] * np.cumprod(growth, axis=0)
    cap0 = np.exp(rng.normal(math.log(5e9), 1.0, N))
    adv0 = np.exp(rng.normal(math.log(2e7), 1.0, N))
    dates = pd.bdate_range(spec.start_date, periods=T)

    return MarketPanel(
        dates=dates,
        stock_ids=tuple(f"S{i:04d}" for i in range(N)),
        close=close,
        total_return=r,
        market_cap=np.broadcast_to(cap0, (T, N)),
        adv=np.broadcast_to(adv0, (T, N)),
        sector=tuple(f"SEC{g}" for g in groups),
        fundamentals=_synthetic_fundamentals(rng, dates, cap0),
        alpha=alpha,
        name=name or f"synthetic-{spec.seed}",
    )


def _synthetic_fundamentals(rng: np.random.Generator, dates: pd.DatetimeIndex, cap: np.ndarray) -> pd.DataFrame:
    """Quarterly statements available 30 days after each quarter end."""
    N = len(cap)
    quarters = pd.period_range(dates[0] - pd.offsets.QuarterBegin(startingMonth=1), dates[-1], freq="Q")
    assets = cap * np.exp(rng.normal(0.0, 0.5, N))
    noa = 0.6 * assets
    rows = []
    for q in quarters:
        report = (q.end_time + pd.Timedelta(days=30)).normalize()
        assets = assets * np.exp(rng.normal(0.01, 0.03, N))
        noa = noa * np.exp(rng.normal(0.01, 0.05, N))
        vals = {
            "total_assets": assets,
            "net_operating_assets": noa,
            "total_equity": 0.4 * assets * np.exp(rng.normal(0.0, 0.2, N)),
            "operating_cash_flow": assets * rng.normal(0.03, 0.02, N),
            "net_income": assets * rng.normal(0.02, 0.02, N),
            "dividends": assets * np.abs(rng.normal(0.005, 0.005, N)),
        }
        for fld in FUNDAMENTAL_FIELDS:
            v = vals[fld]
            rows.extend((report, f"S{i:04d}", fld, float(v[i])) for i in range(N))
    df = pd.DataFrame(rows, columns=list(FUNDAMENTAL_COLUMNS))
    return df.sort_values(["report_date", "stock_id", "field"], kind="mergesort").reset_index(drop=True)


@dataclass(frozen=True)
class Universe:
    """Quarterly investment pools chosen from data strictly before each quarter."""

    pool_name: str
    liquidity_size: int
    cap_filter_size: int | None
    quarters: tuple[pd.Period, ...]
    members: tuple[tuple[str, ...], ...]
    skipped: dict = field(default_factory=dict)

    def members_at(self, date) -> tuple[str, ...] | None:
        q = pd.Timestamp(date).to_period("Q")
        try:
            return self.members[self.quarters.index(q)]
        except ValueError:
            return None

    def quarter_of(self, date) -> pd.Period:
        return pd.Timestamp(date).to_period("Q")


def select_universe(
    panel: MarketPanel,
    liquidity_size: int,
    cap_filter_size: int | None = None,
    *,
    adv_window: int = ADV_WINDOW,
) -> Universe:
    """Rank stocks by trailing average ADV before each calendar quarter.

    With ``cap_filter_size`` the ranking is restricted to the largest caps
    (last available cap in the trailing window) first. Ties are broken by
    stock id. Quarters with fewer than ``adv_window`` prior trading days are
    listed in ``Universe.skipped``.
    """
    if liquidity_size < 1:
        raise ConfigError("liquidity_size must be >= 1")
    if cap_filter_size is not None and cap_filter_size < liquidity_size:
        raise ConfigError("cap_filter_size must be >= liquidity_size")

    quarters, members, skipped = [], [], {}
    ids = np.array(panel.stock_ids)
    for q in pd.period_range(panel.dates[0], panel.dates[-1], freq="Q"):
        start = int(panel.dates.searchsorted(q.start_time, side="left"))
        if start < adv_window:
            skipped[str(q)] = f"warm-up: {start} trading days before quarter start, need {adv_window}"
            continue
        window = slice(start - adv_window, start)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            adv = np.nanmean(panel.adv[window], axis=0)
        eligible = ~np.isnan(adv) & (adv > 0)
        if cap_filter_size is not None:
            cap = pd.DataFrame(panel.market_cap[window]).ffill().to_numpy()[-1]
            ok = eligible & ~np.isnan(cap)
            idx = np.flatnonzero(ok)
            order = sorted(idx, key=lambda j: (-cap[j], ids[j]))
            keep = np.zeros_like(eligible)
            keep[order[:cap_filter_size]] = True
            eligible = keep
        idx = np.flatnonzero(eligible)
        order = sorted(idx, key=lambda j: (-adv[j], ids[j]))[:liquidity_size]
        quarters.append(q)
        members.append(tuple(sorted(ids[order])))
    if not quarters:
        raise WarmupError(f"no quarter of {panel.name} has {adv_window} days of ADV history: {skipped}")
    return Universe(
        pool_name=panel.name,
        liquidity_size=liquidity_size,
        cap_filter_size=cap_filter_size,
        quarters=tuple(quarters),
        members=tuple(members),
        skipped=skipped,
    )

