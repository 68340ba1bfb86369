"""Batch runs: configuration, orchestration and report files."""

from __future__ import annotations

import contextlib
import json
import math
import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np
import pandas as pd
import yaml

from . import analytics
from .backtest import (
    BacktestResult,
    CostParams,
    ModelConfig,
    aggregate_worldwide,
    normalize_risk,
    run_pool_backtest,
)
from .construction import DEFAULT_HALFLIFE_GRID, parse_scheme
from .data import MarketPanel, SyntheticSpec, generate_synthetic, load_panel, select_universe
from .errors import ConfigError, DataError, DegenerateError, PortconError
from .signals import FACTORS

__all__ = ["PoolConfig", "RunConfig", "compare", "load_config", "run"]

OUTPUT_ROOT_ENV = "PORTCON_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "portcon-output"


def default_output(name: str) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)) / name


@dataclass
class PoolConfig:
    name: str
    liquidity_size: int = 100
    cap_filter_size: int | None = None
    synthetic: dict | None = None
    prices: str | None = None
    fundamentals: str | None = None

    def __post_init__(self) -> None:
        if (self.synthetic is None) == (self.prices is None):
            raise ConfigError(f"pool {self.name!r}: give exactly one of 'synthetic' or 'prices'")


@dataclass
class RunConfig:
    """Everything a run depends on. ``resolved()`` is written next to the reports."""

    pools: list[PoolConfig] = field(default_factory=lambda: [PoolConfig("synthetic", synthetic={})])
    factors: list[str] = field(default_factory=lambda: ["momentum"])
    schemes: list[str] = field(default_factory=lambda: ["ff", "neutral", "beta", "betaopt", "markowitz:k=5"])
    output_dir: str | None = None
    seed: int = 0
    covariance: dict = field(default_factory=dict)
    cost_aware: dict = field(default_factory=dict)
    costs: dict = field(default_factory=dict)
    start: str | None = None
    end: str | None = None
    risk_target: float = 0.10
    kink_n: list[float] = field(default_factory=lambda: [1, 2, 3])
    rolling_window: int = 252
    k_bounds: list[int] = field(default_factory=lambda: [1, 5])
    aggregation: str = "flat"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}; valid keys: {sorted(known)}")
        if "pools" in d:
            pools = []
            for i, p in enumerate(d["pools"] or []):
                if not isinstance(p, dict):
                    raise ConfigError(f"pools[{i}] must be a mapping")
                bad = sorted(set(p) - {f.name for f in fields(PoolConfig)})
                if bad:
                    raise ConfigError(f"pools[{i}]: unknown keys {bad}")
                pools.append(PoolConfig(**{"name": f"pool{i}", **p}))
            d["pools"] = pools
        return cls(**d)

    def model_config(self) -> ModelConfig:
        cov = dict(self.covariance)
        ca = dict(self.cost_aware)
        allowed = {"window", "k", "refit_every", "beta_window", "min_obs"}
        if set(cov) - allowed:
            raise ConfigError(f"covariance: unknown keys {sorted(set(cov) - allowed)}")
        allowed_ca = {"calibration_days", "recalibrate_every", "halflife_grid"}
        if set(ca) - allowed_ca:
            raise ConfigError(f"cost_aware: unknown keys {sorted(set(ca) - allowed_ca)}")
        if "halflife_grid" in ca:
            ca["halflife_grid"] = tuple(float(h) for h in ca["halflife_grid"])
        return ModelConfig(**cov, **ca)

    def cost_params(self) -> CostParams:
        allowed = {"commission_bps", "half_spread_bps"}
        if set(self.costs) - allowed:
            raise ConfigError(f"costs: unknown keys {sorted(set(self.costs) - allowed)}")
        return CostParams(**self.costs)

    def validate(self) -> None:
        if not self.pools:
            raise ConfigError("at least one pool is required")
        names = [p.name for p in self.pools]
        if len(set(names)) != len(names):
            raise ConfigError(f"pool names must be unique: {names}")
        if not self.factors or not self.schemes:
            raise ConfigError("at least one factor and one scheme are required")
        for f in self.factors:
            if f not in FACTORS:
                raise ConfigError(f"unknown factor {f!r}; valid ids: {', '.join(FACTORS)}")
        lo, hi = self.k_bounds
        labels = [parse_scheme(s, self.model_config().k, (lo, hi)).label for s in self.schemes]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate schemes: {labels}")
        if self.aggregation not in ("flat", "cap"):
            raise ConfigError("aggregation must be 'flat' or 'cap'")
        if not self.risk_target > 0:
            raise ConfigError("risk_target must be positive")
        self.cost_params()

    def resolved(self) -> dict:
        mc = self.model_config()
        cp = self.cost_params()
        d = asdict(self)
        d["covariance"] = {k: getattr(mc, k) for k in ("window", "k", "refit_every", "beta_window", "min_obs")}
        d["cost_aware"] = {
            "calibration_days": mc.calibration_days,
            "recalibrate_every": mc.recalibrate_every,
            "halflife_grid": list(mc.halflife_grid),
        }
        d["costs"] = {"commission_bps": cp.commission_bps, "half_spread_bps": cp.half_spread_bps}
        d["schemes"] = [parse_scheme(s, mc.k, tuple(self.k_bounds)).label for s in self.schemes]
        pools = []
        for i, p in enumerate(self.pools):
            pd_ = asdict(p)
            if p.synthetic is not None:
                pd_["synthetic"] = asdict(self.synthetic_spec(i))
            pools.append(pd_)
        d["pools"] = pools
        return d

    def synthetic_spec(self, i: int) -> SyntheticSpec:
        p = self.pools[i]
        params = {"seed": self.seed + i, **(p.synthetic or {})}
        bad = sorted(set(params) - {f.name for f in fields(SyntheticSpec)})
        if bad:
            raise ConfigError(f"pool {p.name!r}: unknown synthetic keys {bad}")
        return SyntheticSpec(**params)


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML config and apply non-None ``overrides`` on top."""
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping at the top level")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in ("covariance", "costs", "cost_aware"):
            raw[key] = {**(raw.get(key) or {}), **value}
        else:
            raw[key] = value
    cfg = RunConfig.from_dict(raw)
    cfg.validate()
    return cfg


@contextlib.contextmanager
def stage(name: str, **context: Any) -> Iterator[None]:
    """Prefix any library error raised inside with the stage and its inputs."""
    try:
        yield
    except PortconError as exc:
        where = " ".join(f"{k}={v}" for k, v in context.items())
        msg = f"[stage={name}{' ' + where if where else ''}] {exc}"
        raise type(exc)(msg) from exc


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", label.replace(":k=", "_k"))


def _clean(obj: Any) -> Any:
    """JSON-safe copy: NaN/inf become null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(path: Path, df: pd.DataFrame) -> None:
    df.to_csv(path, index=False, float_format="%.12g", lineterminator="\n")


def prepare_output(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"output directory {path} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)


def load_pools(cfg: RunConfig) -> list[tuple[MarketPanel, Any]]:
    out = []
    for i, p in enumerate(cfg.pools):
        with stage("data", pool=p.name):
            if p.synthetic is not None:
                panel = generate_synthetic(cfg.synthetic_spec(i), name=p.name)
            else:
                panel = load_panel(p.prices, p.fundamentals, name=p.name)
            universe = select_universe(panel, p.liquidity_size, p.cap_filter_size)
        out.append((panel, universe))
    return out


def world_index(panels: Sequence[MarketPanel]) -> pd.Series:
    """Flat average of the pools' cap-weighted index returns, date by date."""
    frame = pd.concat([pd.Series(p.index_returns, index=p.dates) for p in panels], axis=1)
    return frame.mean(axis=1, skipna=True).iloc[1:]


def run(cfg: RunConfig, output_dir: str | Path | None = None, force: bool = False, echo=print) -> dict:
    """Execute every (pool, factor, scheme) combination and write the reports.

    Layout under the output directory::

        resolved_config.json  summary.json  sharpe_table.csv  kinks.csv
        <factor>/<scheme>/pnl.csv, summary.json, skew_curve.csv, conditional.csv,
                          rolling.csv, exposures.csv, sector_exposures.csv,
                          pools/<pool>.csv
    """
    cfg.validate()
    out = Path(output_dir or cfg.output_dir or default_output("run"))
    prepare_output(out, force)
    mc, cp = cfg.model_config(), cfg.cost_params()
    schemes = [parse_scheme(s, mc.k, tuple(cfg.k_bounds)) for s in cfg.schemes]

    pools = load_pools(cfg)
    panels = [p for p, _ in pools]
    idx_daily = world_index(panels)
    idx_weekly = analytics.weekly_closes(idx_daily)
    with stage("analytics", what="kinks"):
        candidates = analytics.kink_candidates(idx_weekly)
    kink_rows = [
        {"kind": e.kind, "date": e.date.strftime("%Y-%m-%d"), "n": n, "depth_sigma": e.depth_sigma}
        for n in cfg.kink_n
        for e in candidates
        if e.depth_sigma >= n
    ]
    write_csv(out / "kinks.csv", pd.DataFrame(kink_rows, columns=["kind", "date", "n", "depth_sigma"]))

    summary: dict = {}
    for factor in cfg.factors:
        world = {}
        per_pool = {}
        for scheme in schemes:
            results = []
            for panel, universe in pools:
                with stage("backtest", pool=panel.name, factor=factor, scheme=scheme.label):
                    results.append(
                        run_pool_backtest(panel, universe, scheme, factor, mc, cp, start=cfg.start, end=cfg.end)
                    )
            weights = None
            if cfg.aggregation == "cap":
                weights = [float(np.nanmean(np.nansum(p.market_cap, axis=1))) for p in panels]
            world[scheme.label] = aggregate_worldwide(results, weights)
            per_pool[scheme.label] = results
        with stage("backtest", factor=factor, what="normalize_risk"):
            normed = dict(zip(world, normalize_risk(list(world.values()), cfg.risk_target)))
        summary[factor] = {}
        for label, res in normed.items():
            d = out / factor / _slug(label)
            (d / "pools").mkdir(parents=True, exist_ok=True)
            with stage("analytics", factor=factor, scheme=label):
                stats = _write_scheme_reports(d, res, per_pool[label], panels, candidates, cfg)
            summary[factor][label] = stats

    write_json(out / "summary.json", summary)
    table = pd.DataFrame(
        [{"factor": f, **{s: summary[f][s]["sharpe_annualized"] for s in summary[f]}} for f in summary]
    )
    write_csv(out / "sharpe_table.csv", table)
    write_json(out / "resolved_config.json", {**cfg.resolved(), "output_dir": str(out)})
    echo(format_table(summary))
    return summary


def _write_scheme_reports(d: Path, res: BacktestResult, pools: list[BacktestResult], panels, candidates, cfg: RunConfig) -> dict:
    res.write_csv(d / "pnl.csv")
    for r in pools:
        r.write_csv(d / "pools" / f"{_slug(r.pool)}.csv")

    net = res.pnl_series(net=True)
    weekly = analytics.to_weekly(net)
    stats = analytics.summary(res.net_pnl, res.dates)
    pre = analytics.summary(res.pre_cost_pnl, res.dates)
    stats.update(
        {
            "sharpe_pre_cost": pre["sharpe_annualized"],
            "tstat_pre_cost": pre["tstat"],
            "risk_scale": res.scale,
            "mean_turnover": float(np.mean(res.turnover)),
            "total_cost": float(np.sum(res.costs)),
            "start": res.dates[0].strftime("%Y-%m-%d"),
            "end": res.dates[-1].strftime("%Y-%m-%d"),
            "notes": list(res.notes),
        }
    )
    if res.halflives:
        stats["halflives"] = res.halflives

    if len(weekly) >= 10:
        curve = analytics.skew_curve(weekly)
        write_csv(d / "skew_curve.csv", curve.to_frame())
    else:
        write_csv(d / "skew_curve.csv", pd.DataFrame(columns=["rank", "pnl", "cum_pnl"]))

    cond = analytics.conditional_performance(weekly, candidates, cfg.kink_n)
    write_csv(d / "conditional.csv", cond)

    roll = analytics.rolling_stats(net, pd.Series(res.index_returns, index=res.dates), window=cfg.rolling_window)
    roll.insert(0, "date", res.dates.strftime("%Y-%m-%d"))
    write_csv(d / "rolling.csv", roll)

    exp_rows, sector_rows = [], []
    for r, panel in zip(pools, panels):
        if r.positions is None:
            continue
        e = analytics.exposures(r.positions, dict(zip(panel.stock_ids, panel.sector)))
        exp_rows.append(
            pd.DataFrame(
                {
                    "date": r.dates.strftime("%Y-%m-%d"),
                    "pool": r.pool,
                    "net_over_gross": e["net_over_gross"].to_numpy(),
                    "beta_exposure": r.beta_exposure,
                }
            )
        )
        for sec, v in e["sector"].items():
            sector_rows.append({"pool": r.pool, "sector": sec, "avg_exposure": v})
        sector_rows.append({"pool": r.pool, "sector": "ALL", "avg_exposure": e["average_sector_exposure"]})
    write_csv(
        d / "exposures.csv",
        pd.concat(exp_rows, ignore_index=True) if exp_rows else pd.DataFrame(columns=["date", "pool", "net_over_gross", "beta_exposure"]),
    )
    write_csv(d / "sector_exposures.csv", pd.DataFrame(sector_rows, columns=["pool", "sector", "avg_exposure"]))
    write_json(d / "summary.json", stats)
    return stats


def format_table(summary: dict) -> str:
    schemes: list[str] = []
    for f in summary:
        for s in summary[f]:
            if s not in schemes:
                schemes.append(s)
    width = max([len(s) for s in schemes] + [8])
    fw = max([len(f) for f in summary] + [6])
    lines = ["Sharpe ratio (net of costs, annualised)", " " * fw + "".join(f"  {s:>{width}}" for s in schemes)]
    for f in summary:
        cells = []
        for s in schemes:
            v = summary[f].get(s, {}).get("sharpe_annualized")
            cells.append(f"  {'n/a':>{width}}" if v is None or not math.isfinite(v) else f"  {v:>{width}.2f}")
        lines.append(f"{f:<{fw}}" + "".join(cells))
    return "\n".join(lines)


def _collect(result_dir: Path) -> list[tuple[str, pd.Series]]:
    found = sorted(result_dir.glob("*/*/pnl.csv"))
    if not found:
        raise DataError(f"{result_dir}: no <factor>/<scheme>/pnl.csv files found")
    series = []
    for f in found:
        df = pd.read_csv(f, parse_dates=["date"])
        if "net_pnl" not in df:
            raise DataError(f"{f}: missing net_pnl column")
        label = f"{result_dir.name}/{f.parent.parent.name}/{f.parent.name}"
        series.append((label, pd.Series(df["net_pnl"].to_numpy(), index=pd.DatetimeIndex(df["date"]))))
    return series


def compare(result_dirs: Sequence[str | Path], output_dir: str | Path, risk_target: float = 0.10, force: bool = False, echo=print) -> pd.DataFrame:
    """Risk-normalised cumulative P&L and statistics for every series in the result dirs."""
    series: list[tuple[str, pd.Series]] = []
    for i, d in enumerate(result_dirs):
        for label, s in _collect(Path(d)):
            if any(label == l for l, _ in series):
                label = f"{label}#{i + 1}"
            series.append((label, s))
    if len(series) < 2:
        raise DataError(f"comparison needs at least 2 result series, found {len(series)}")
    common = series[0][1].index
    for _, s in series[1:]:
        common = common.intersection(s.index)
    if len(common) < 2:
        raise DataError("result sets have no overlapping dates")
    out = Path(output_dir)
    prepare_output(out, force)

    cum = pd.DataFrame(index=common)
    rows = []
    for label, s in series:
        x = s.reindex(common).to_numpy(dtype=float)
        vol = float(np.std(x, ddof=1)) * math.sqrt(252)
        if not vol > 0:
            raise DegenerateError(f"{label}: zero-variance P&L on the common dates")
        x = x * (risk_target / vol)
        cum[label] = np.cumsum(x)
        st = analytics.summary(x, common)
        rows.append(
            {
                "series": label,
                "sharpe_annualized": st["sharpe_annualized"],
                "tstat": st["tstat"],
                "skewness_weekly": st.get("skewness_weekly"),
                "vol_annualized": st["vol_annualized"],
            }
        )
    cum.insert(0, "date", common.strftime("%Y-%m-%d"))
    write_csv(out / "cumulative_pnl.csv", cum.reset_index(drop=True))
    stats = pd.DataFrame(rows)
    write_csv(out / "stats.csv", stats)
    echo(stats.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    return stats
