"""Command-line entry point: ``portcon run | compare | gen-data | kinks``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 computation error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import pandas as pd

from . import analytics, pipeline
from .data import SyntheticSpec, generate_synthetic, write_panel_csv
from .errors import ConfigError, DataError, PortconError

log = logging.getLogger("portcon")


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors map to exit code 1."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="portcon", description="Factor portfolio construction backtests and diagnostics.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="backtest every (pool, factor, scheme) and write reports")
    r.add_argument("--config", help="YAML run configuration")
    r.add_argument("--output", help="output directory (default: $PORTCON_OUTPUT_ROOT/run)")
    r.add_argument("--seed", type=int)
    r.add_argument("--factor", nargs="+", dest="factors", help="factor ids")
    r.add_argument("--scheme", nargs="+", dest="schemes", help="scheme ids, e.g. neutral markowitz:k=3")
    r.add_argument("--k", type=int, help="default k for markowitz/costaware without an explicit k")
    r.add_argument("--window", type=int, help="covariance estimation window in days")
    r.add_argument("--commission-bps", type=float)
    r.add_argument("--half-spread-bps", type=float)
    r.add_argument("--start")
    r.add_argument("--end")
    r.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    c = sub.add_parser("compare", help="risk-normalised comparison of run result directories")
    c.add_argument("dirs", nargs="+", help="directories written by 'portcon run'")
    c.add_argument("--output", help="output directory (default: $PORTCON_OUTPUT_ROOT/compare)")
    c.add_argument("--risk-target", type=float, default=0.10)
    c.add_argument("--force", action="store_true")

    g = sub.add_parser("gen-data", help="write a synthetic panel as CSV")
    g.add_argument("--output", help="output directory (default: $PORTCON_OUTPUT_ROOT/data)")
    for f in fields(SyntheticSpec):
        if f.name == "start_date":
            g.add_argument("--start-date")
        else:
            g.add_argument(f"--{f.name.replace('_', '-')}", type=type(f.default))
    g.add_argument("--force", action="store_true")

    k = sub.add_parser("kinks", help="kink detection on an index CSV (columns date,close)")
    k.add_argument("index_csv")
    k.add_argument("--n", nargs="+", type=float, default=[1.0, 2.0, 3.0])
    k.add_argument("--pnl", help="daily strategy P&L CSV (date plus net_pnl or pnl column)")
    k.add_argument("--output", help="output directory (default: $PORTCON_OUTPUT_ROOT/kinks)")
    k.add_argument("--force", action="store_true")
    return p


def _cmd_run(a) -> None:
    overrides = {
        "seed": a.seed,
        "factors": a.factors,
        "schemes": a.schemes,
        "start": a.start,
        "end": a.end,
        "output_dir": a.output,
    }
    cov = {k: v for k, v in (("k", a.k), ("window", a.window)) if v is not None}
    costs = {
        k: v
        for k, v in (("commission_bps", a.commission_bps), ("half_spread_bps", a.half_spread_bps))
        if v is not None
    }
    overrides["covariance"] = cov or None
    overrides["costs"] = costs or None
    cfg = pipeline.load_config(a.config, overrides)
    pipeline.run(cfg, force=a.force)


def _cmd_compare(a) -> None:
    pipeline.compare(a.dirs, a.output or pipeline.default_output("compare"), a.risk_target, force=a.force)


def _cmd_gen_data(a) -> None:
    params = {}
    for f in fields(SyntheticSpec):
        v = getattr(a, f.name, None)
        if v is not None:
            params[f.name] = v
    spec = SyntheticSpec(**params)
    out = Path(a.output or pipeline.default_output("data"))
    pipeline.prepare_output(out, a.force)
    panel = generate_synthetic(spec)
    write_panel_csv(panel, out / "prices.csv", out / "fundamentals.csv")
    print(f"wrote {panel.n_days} days x {panel.n_stocks} stocks to {out}")


def _read_dated(path: str, columns: tuple[str, ...]) -> pd.DataFrame:
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if "date" not in df or not any(c in df for c in columns):
        raise DataError(f"{path}: expected a 'date' column and one of {list(columns)}")
    try:
        df["date"] = pd.to_datetime(df["date"], format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}: unparseable date: {exc}") from None
    if not df["date"].is_monotonic_increasing or df["date"].duplicated().any():
        raise DataError(f"{path}: dates must be strictly increasing")
    return df


def _cmd_kinks(a) -> None:
    idx = _read_dated(a.index_csv, ("close",))
    closes = pd.Series(idx["close"].to_numpy(dtype=float), index=pd.DatetimeIndex(idx["date"]))
    weekly = closes.resample("W-SUN").last().dropna()
    if len(weekly) < analytics.KINK_VOL_WEEKS + analytics.KINK_WINDOW:
        raise DataError(
            f"kink detection needs at least {analytics.KINK_VOL_WEEKS + analytics.KINK_WINDOW} weeks, got {len(weekly)}"
        )
    candidates = analytics.kink_candidates(weekly)
    out = Path(a.output or pipeline.default_output("kinks"))
    pipeline.prepare_output(out, a.force)
    rows = [
        {"kind": e.kind, "date": e.date.strftime("%Y-%m-%d"), "n": n, "depth_sigma": e.depth_sigma}
        for n in a.n
        for e in candidates
        if e.depth_sigma >= n
    ]
    pipeline.write_csv(out / "kinks.csv", pd.DataFrame(rows, columns=["kind", "date", "n", "depth_sigma"]))
    first = weekly.index[analytics.KINK_VOL_WEEKS].strftime("%Y-%m-%d")
    print(f"{len(rows)} event rows; weeks before {first} are warm-up and carry no events")
    if a.pnl:
        pnl = _read_dated(a.pnl, ("net_pnl", "pnl"))
        col = "net_pnl" if "net_pnl" in pnl else "pnl"
        weekly_pnl = analytics.to_weekly(pd.Series(pnl[col].to_numpy(dtype=float), index=pd.DatetimeIndex(pnl["date"])))
        cond = analytics.conditional_performance(weekly_pnl, candidates, a.n)
        pipeline.write_csv(out / "conditional.csv", cond)
        print(cond.to_string(index=False))


COMMANDS = {"run": _cmd_run, "compare": _cmd_compare, "gen-data": _cmd_gen_data, "kinks": _cmd_kinks}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except PortconError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    except (ArithmeticError, ValueError) as exc:
        # numerical failures outside the library's own checks (e.g. LinAlgError)
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
