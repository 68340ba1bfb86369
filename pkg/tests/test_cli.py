import json

import numpy as np
import pandas as pd
import pytest
import yaml

from portcon.cli import main
from portcon.pipeline import RunConfig, load_config

SMALL = {
    "pools": [{"name": "syn", "liquidity_size": 20, "synthetic": {"n_stocks": 25, "n_days": 700, "embedded_alpha": 0.03}}],
    "factors": ["momentum"],
    "schemes": ["neutral"],
    "covariance": {"window": 120, "k": 2},
    "seed": 7,
}

REPORTS = ("pnl.csv", "summary.json", "skew_curve.csv", "conditional.csv", "rolling.csv", "exposures.csv", "sector_exposures.csv")


def write_config(tmp_path, cfg=SMALL, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg))
    return p


def test_run_smoke(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", str(write_config(tmp_path)), "--output", str(out)]) == 0
    for f in REPORTS:
        assert (out / "momentum" / "neutral" / f).is_file(), f
    for f in ("summary.json", "resolved_config.json", "sharpe_table.csv", "kinks.csv"):
        assert (out / f).is_file()
    summary = json.loads((out / "summary.json").read_text())
    assert "sharpe_annualized" in summary["momentum"]["neutral"]
    pnl = pd.read_csv(out / "momentum" / "neutral" / "pnl.csv")
    assert list(pnl.columns) == ["date", "pre_cost_pnl", "cost", "net_pnl", "turnover", "gross", "net_exposure"]
    assert list(pd.read_csv(out / "kinks.csv").columns) == ["kind", "date", "n", "depth_sigma"]
    assert list(pd.read_csv(out / "momentum" / "neutral" / "conditional.csv").columns) == ["kind", "n", "mean", "stderr", "count"]
    assert list(pd.read_csv(out / "momentum" / "neutral" / "skew_curve.csv").columns) == ["rank", "pnl", "cum_pnl"]
    assert "Sharpe" in capsys.readouterr().out


def test_resolved_config_complete(tmp_path):
    out = tmp_path / "out"
    main(["run", "--config", str(write_config(tmp_path)), "--output", str(out)])
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["covariance"] == {"window": 120, "k": 2, "refit_every": 21, "beta_window": 252, "min_obs": 60}
    assert resolved["costs"] == {"commission_bps": 1.0, "half_spread_bps": 5.0}
    assert resolved["pools"][0]["synthetic"]["seed"] == 7
    # the resolved config reproduces the run
    cfg = resolved.copy()
    cfg.pop("output_dir")
    again = RunConfig.from_dict(cfg)
    assert again.resolved() == {k: v for k, v in resolved.items() if k != "output_dir"} | {"output_dir": None}


def test_unknown_scheme(tmp_path, capsys):
    code = main(["run", "--config", str(write_config(tmp_path)), "--scheme", "minvar", "--output", str(tmp_path / "o")])
    assert code == 1
    err = capsys.readouterr().err
    assert "minvar" in err and "markowitz:k=<int>" in err and "costaware:k=<int>" in err


def test_unknown_factor_and_key(tmp_path):
    assert main(["run", "--config", str(write_config(tmp_path)), "--factor", "value", "--output", str(tmp_path / "o")]) == 1
    bad = dict(SMALL, colour="red")
    assert main(["run", "--config", str(write_config(tmp_path, bad, "bad.yaml")), "--output", str(tmp_path / "o2")]) == 1


def test_k_bounds(tmp_path):
    args = ["run", "--config", str(write_config(tmp_path)), "--output", str(tmp_path / "o")]
    assert main(args + ["--scheme", "markowitz:k=7"]) == 1
    cfg = dict(SMALL, k_bounds=[1, 8], schemes=["markowitz:k=7"])
    load_config(write_config(tmp_path, cfg, "k.yaml"))


def test_usage_error_exit_code(capsys):
    assert main(["frobnicate"]) == 1
    assert main(["run", "--seed", "abc"]) == 1


def test_determinism(tmp_path):
    cfg = write_config(tmp_path, dict(SMALL, schemes=["neutral", "markowitz:k=2"]))
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(cfg), "--output", str(a)]) == 0
    assert main(["run", "--config", str(cfg), "--output", str(b)]) == 0
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for f in files:
        if f.name == "resolved_config.json":
            ra, rb = (json.loads((d / f).read_text()) for d in (a, b))
            ra.pop("output_dir"), rb.pop("output_dir")
            assert ra == rb
        else:
            assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_overwrite_protection(tmp_path, capsys):
    cfg = str(write_config(tmp_path))
    out = str(tmp_path / "out")
    assert main(["run", "--config", cfg, "--output", out]) == 0
    assert main(["run", "--config", cfg, "--output", out]) == 1
    assert "--force" in capsys.readouterr().err
    assert main(["run", "--config", cfg, "--output", out, "--force"]) == 0


def test_flags_override_config(tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", str(write_config(tmp_path)), "--output", str(out), "--seed", "11", "--half-spread-bps", "2"]) == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["seed"] == 11 and resolved["costs"]["half_spread_bps"] == 2.0


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("PORTCON_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["run", "--config", str(write_config(tmp_path))]) == 0
    assert (tmp_path / "root" / "run" / "summary.json").is_file()


def test_data_error_exit_code(tmp_path, capsys):
    prices = tmp_path / "p.csv"
    prices.write_text("date,stock_id,close,total_return,market_cap,adv,sector\n2021-01-05,A,1,,1,1,X\n2021-01-04,A,1,,1,1,X\n")
    cfg = {"pools": [{"name": "csv", "prices": str(prices), "liquidity_size": 5}]}
    assert main(["run", "--config", str(write_config(tmp_path, cfg)), "--output", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "stage=data" in err and "pool=csv" in err and "p.csv:3" in err


def test_computation_error_exit_code(tmp_path, capsys):
    # the latent alpha needs a synthetic panel with embedded alpha: a config error
    cfg = dict(SMALL, factors=["alpha"], pools=[{"name": "s", "liquidity_size": 20, "synthetic": {"n_stocks": 25, "n_days": 700}}])
    assert main(["run", "--config", str(write_config(tmp_path, cfg)), "--output", str(tmp_path / "o")]) == 1
    assert "stage=backtest" in capsys.readouterr().err
    # a zero-variance P&L series cannot be risk normalised
    flat = tmp_path / "flat" / "f" / "s"
    flat.mkdir(parents=True)
    d = pd.bdate_range("2020-01-01", periods=10).strftime("%Y-%m-%d")
    pd.DataFrame({"date": d, "net_pnl": 0.0}).to_csv(flat / "pnl.csv", index=False)
    other = tmp_path / "flat" / "f" / "u"
    other.mkdir()
    pd.DataFrame({"date": d, "net_pnl": np.arange(10.0)}).to_csv(other / "pnl.csv", index=False)
    assert main(["compare", str(tmp_path / "flat"), "--output", str(tmp_path / "c")]) == 3
    assert "zero-variance" in capsys.readouterr().err


def test_gen_data_and_csv_run(tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--output", str(data), "--n-stocks", "25", "--n-days", "700", "--seed", "3"]) == 0
    assert (data / "prices.csv").is_file() and (data / "fundamentals.csv").is_file()
    cfg = {
        "pools": [{"name": "csv", "prices": str(data / "prices.csv"), "fundamentals": str(data / "fundamentals.csv"), "liquidity_size": 20}],
        "factors": ["quality"],
        "schemes": ["ff"],
    }
    assert main(["run", "--config", str(write_config(tmp_path, cfg)), "--output", str(tmp_path / "o")]) == 0
    assert main(["gen-data", "--output", str(data), "--idio-vol", "0"]) == 1


def test_compare(tmp_path):
    cfg = write_config(tmp_path, dict(SMALL, schemes=["ff", "neutral", "beta", "betaopt", "markowitz:k=2"]))
    a = tmp_path / "a"
    assert main(["run", "--config", str(cfg), "--output", str(a)]) == 0
    out = tmp_path / "cmp"
    assert main(["compare", str(a), str(a), "--output", str(out)]) == 0
    cum = pd.read_csv(out / "cumulative_pnl.csv")
    assert cum.shape[1] == 1 + 10
    np.testing.assert_array_equal(cum["a/momentum/neutral"], cum["a/momentum/neutral#2"])
    stats = pd.read_csv(out / "stats.csv")
    vols = stats["vol_annualized"].to_numpy()
    np.testing.assert_allclose(vols, vols[0], rtol=1e-10)
    out2 = tmp_path / "cmp2"
    assert main(["compare", str(a), "--output", str(out2)]) == 0
    assert pd.read_csv(out2 / "stats.csv")["series"].tolist() == stats["series"].tolist()[:5]


def test_compare_disjoint(tmp_path):
    base = dict(SMALL, pools=[dict(SMALL["pools"][0], synthetic={"n_stocks": 25, "n_days": 1400})])
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(write_config(tmp_path, dict(base, end="2002-09-09"), "a.yaml")), "--output", str(a)]) == 0
    assert main(["run", "--config", str(write_config(tmp_path, dict(base, start="2002-09-10"), "b.yaml")), "--output", str(b)]) == 0
    assert main(["compare", str(a), str(b), "--output", str(tmp_path / "c")]) == 2


def test_kinks_command(tmp_path):
    rng = np.random.default_rng(0)
    d = pd.bdate_range("2010-01-04", periods=900)
    level = 100 * np.exp(np.cumsum(0.01 * rng.standard_normal(900)))
    pd.DataFrame({"date": d.strftime("%Y-%m-%d"), "close": level}).to_csv(tmp_path / "idx.csv", index=False)
    pd.DataFrame({"date": d.strftime("%Y-%m-%d"), "net_pnl": rng.standard_normal(900)}).to_csv(tmp_path / "pnl.csv", index=False)
    out = tmp_path / "k"
    assert main(["kinks", str(tmp_path / "idx.csv"), "--pnl", str(tmp_path / "pnl.csv"), "--n", "1", "2", "--output", str(out)]) == 0
    k = pd.read_csv(out / "kinks.csv")
    assert set(k["n"]) <= {1.0, 2.0} and (k["depth_sigma"] >= k["n"]).all()
    c = pd.read_csv(out / "conditional.csv")
    assert len(c) == 4
    short = pd.DataFrame({"date": d[:100].strftime("%Y-%m-%d"), "close": level[:100]})
    short.to_csv(tmp_path / "short.csv", index=False)
    assert main(["kinks", str(tmp_path / "short.csv"), "--output", str(tmp_path / "k2")]) == 2


def test_example_config_is_valid():
    from pathlib import Path

    cfg = load_config(Path(__file__).parent.parent / "configs" / "example.yaml")
    cfg.validate()
    assert cfg.resolved()["schemes"][-1] == "costaware:k=5"
