import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_panel
from portcon.backtest import (
    BacktestResult,
    CostParams,
    ModelConfig,
    aggregate_worldwide,
    annualized_vol,
    normalize_risk,
    run_pool_backtest,
)
from portcon.data import select_universe
from portcon.errors import ConfigError, DataError, DegenerateError, WarmupError

FAST = ModelConfig(window=120, k=2, beta_window=120, calibration_days=60, recalibrate_every=60, halflife_grid=(1, 5, 21))


def size_panel(T=400, returns=None, caps=(1.0, 2.0, 3.0, 4.0)):
    n = len(caps)
    r = np.zeros((T, n)) if returns is None else returns
    return make_panel(r, caps=list(caps))


def result(pnl, dates=None, scheme="s", pool="p", cost=None):
    pnl = np.asarray(pnl, dtype=float)
    n = len(pnl)
    dates = dates if dates is not None else pd.bdate_range("2020-01-01", periods=n)
    z = np.zeros(n)
    return BacktestResult(pool, scheme, "f", dates, pnl, z.copy() if cost is None else np.asarray(cost, float), z.copy(), z.copy(), np.ones(n), z.copy(), z.copy(), z.copy())


def test_zero_predictor_is_flat():
    panel = size_panel(caps=(1.0, 1.0, 1.0, 1.0))  # equal caps: the size signal is constant
    res = run_pool_backtest(panel, select_universe(panel, 4), "neutral", "size")
    assert np.all(res.pre_cost_pnl == 0) and np.all(res.costs == 0) and np.all(res.gross == 0)
    assert any("flat" in n for n in res.notes)


def test_constant_portfolio_accounting():
    rng = np.random.default_rng(0)
    r = rng.normal(0, 0.01, (400, 4))
    panel = size_panel(returns=r)
    res = run_pool_backtest(panel, select_universe(panel, 4), "neutral", "size")
    x = res.positions.iloc[0].to_numpy()
    np.testing.assert_allclose(res.positions.to_numpy(), np.tile(x, (len(res), 1)))
    rows = panel.dates.get_indexer(res.dates)
    np.testing.assert_allclose(res.pre_cost_pnl[1:], r[rows[1:]] @ x, rtol=1e-13)
    assert res.pre_cost_pnl[0] == 0
    assert res.turnover[0] == pytest.approx(1.0) and np.all(res.turnover[1:] == 0)


def test_simple_sum_round_trip():
    T = 400
    r = np.zeros((T, 4))
    panel0 = size_panel(returns=r)
    start = run_pool_backtest(panel0, select_universe(panel0, 4), "neutral", "size").dates[0]
    s = panel0.date_index(start)
    r[s + 1, 3] = 0.01
    r[s + 2, 3] = -0.01
    panel = size_panel(returns=r)
    res = run_pool_backtest(panel, select_universe(panel, 4), "neutral", "size")
    assert res.pre_cost_pnl[1] == -res.pre_cost_pnl[2] != 0
    assert res.pre_cost_pnl.sum() == 0.0


def test_costs_charged_on_turnover(alpha_panel):
    u = select_universe(alpha_panel, 30)
    cp = CostParams(commission_bps=1, half_spread_bps=5)
    res = run_pool_backtest(alpha_panel, u, "neutral", "alpha", FAST, cp)
    np.testing.assert_allclose(res.commission, 1e-4 * res.turnover, rtol=1e-15)
    np.testing.assert_allclose(res.spread_cost, 5e-4 * res.turnover, rtol=1e-15)
    np.testing.assert_array_equal(res.net_pnl, res.pre_cost_pnl - res.costs)
    assert math.isclose(math.fsum(res.net_pnl), math.fsum(res.pre_cost_pnl) - math.fsum(res.costs), abs_tol=1e-12)
    assert res.turnover[0] == pytest.approx(res.gross[0])
    assert np.all(res.costs >= 0) and np.all(res.turnover >= 0)


@settings(max_examples=6, deadline=None)
@given(st.floats(0, 50), st.floats(0, 50), st.floats(0, 10))
def test_cost_monotonicity(comm, spread, bump):
    panel = _mono_panel()
    u = select_universe(panel, 30)
    a = run_pool_backtest(panel, u, "neutral", "alpha", FAST, CostParams(comm, spread))
    b = run_pool_backtest(panel, u, "neutral", "alpha", FAST, CostParams(comm + bump, spread))
    c = run_pool_backtest(panel, u, "neutral", "alpha", FAST, CostParams(comm, spread + bump))
    np.testing.assert_array_equal(a.turnover, b.turnover)
    assert np.all(b.net_pnl <= a.net_pnl) and np.all(c.net_pnl <= a.net_pnl)


_cache = {}


def _mono_panel():
    if "p" not in _cache:
        from portcon.data import SyntheticSpec, generate_synthetic

        _cache["p"] = generate_synthetic(SyntheticSpec(n_stocks=30, n_days=400, embedded_alpha=0.05, seed=2))
    return _cache["p"]


@pytest.mark.parametrize("scheme", ["ff", "neutral", "beta", "betaopt", "markowitz:k=2", "costaware:k=2"])
def test_causality_truncation(alpha_panel, scheme):
    u = select_universe(alpha_panel, 30)
    full = run_pool_backtest(alpha_panel, u, scheme, "alpha", FAST)
    cut = alpha_panel.dates[700]
    short_panel = alpha_panel.truncate(cut)
    short = run_pool_backtest(short_panel, select_universe(short_panel, 30), scheme, "alpha", FAST)
    n = len(short)
    assert short.dates.equals(full.dates[:n])
    np.testing.assert_array_equal(short.pre_cost_pnl, full.pre_cost_pnl[:n])
    np.testing.assert_array_equal(short.turnover, full.turnover[:n])
    np.testing.assert_array_equal(short.positions.to_numpy(), full.positions.to_numpy()[:n])


def test_scheme_invariants_each_day(alpha_panel):
    u = select_universe(alpha_panel, 30)
    neutral = run_pool_backtest(alpha_panel, u, "neutral", "alpha", FAST)
    assert np.all(np.abs(neutral.net_exposure) <= 1e-12 * neutral.gross)
    ff = run_pool_backtest(alpha_panel, u, "ff", "alpha", FAST)
    x = ff.positions.to_numpy()
    np.testing.assert_allclose(np.where(x > 0, x, 0).sum(axis=1), 0.5, atol=1e-12)
    np.testing.assert_allclose(np.where(x < 0, x, 0).sum(axis=1), -0.5, atol=1e-12)


def test_only_universe_members_held(alpha_panel):
    u = select_universe(alpha_panel, 15)
    res = run_pool_backtest(alpha_panel, u, "markowitz:k=2", "alpha", FAST)
    for d, row in res.positions.iloc[::50].iterrows():
        held = set(row.index[row.to_numpy() != 0])
        assert held <= set(u.members_at(d))


def test_warmup_adjustment_reported(alpha_panel):
    u = select_universe(alpha_panel, 30)
    res = run_pool_backtest(alpha_panel, u, "markowitz:k=2", "alpha", FAST, start=alpha_panel.dates[5])
    assert res.dates[0] > alpha_panel.dates[5]
    assert any("adjusted" in n for n in res.notes)
    with pytest.raises(WarmupError):
        run_pool_backtest(alpha_panel, u, "markowitz:k=2", "alpha", ModelConfig(window=5000))


def test_delisted_stock_liquidated():
    rng = np.random.default_rng(1)
    T = 400
    r = rng.normal(0, 0.01, (T, 4))
    panel0 = size_panel(returns=r)
    u = select_universe(panel0, 4)
    start = run_pool_backtest(panel0, u, "neutral", "size").dates[0]
    s = panel0.date_index(start) + 10
    close = panel0.close.copy()
    close[s:, 0] = np.nan
    r2 = panel0.total_return.copy()
    r2[s:, 0] = np.nan
    from portcon.data import MarketPanel

    panel = MarketPanel(panel0.dates, panel0.stock_ids, close, r2, panel0.market_cap, panel0.adv, panel0.sector)
    res = run_pool_backtest(panel, u, "neutral", "size")
    i = res.dates.get_loc(panel.dates[s])
    assert res.positions.iloc[i - 1, 0] != 0 and res.positions.iloc[i, 0] == 0
    assert res.turnover[i] > 0 and res.costs[i] > 0
    assert any("missing return" in n for n in res.notes)


def test_invalid_costs():
    with pytest.raises(ConfigError):
        CostParams(commission_bps=-1)


def test_aggregate_single_identity():
    r = result([0.1, -0.2, 0.3])
    a = aggregate_worldwide([r])
    np.testing.assert_array_equal(a.pre_cost_pnl, r.pre_cost_pnl)
    assert a.dates.equals(r.dates)


def test_aggregate_flat_average_and_availability():
    d = pd.bdate_range("2020-01-01", periods=3)
    a = result([1.0, 1.0, 1.0], d)
    b = result([-1.0, 3.0, 5.0], d)
    c = result([2.0, 2.0], d[[0, 2]])
    agg = aggregate_worldwide([a, b, c])
    np.testing.assert_allclose(agg.pre_cost_pnl, [2 / 3, 2.0, 8 / 3])
    assert aggregate_worldwide([a, result([-1.0, -1.0, -1.0], d)]).pre_cost_pnl.tolist() == [0.0, 0.0, 0.0]
    w = aggregate_worldwide([a, b], weights=[3.0, 1.0])
    np.testing.assert_allclose(w.pre_cost_pnl, [0.5, 1.5, 2.0])
    with pytest.raises(DataError):
        aggregate_worldwide([])


def test_normalize_risk():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(600)
    x = 0.20 / annualized_vol(x) * x
    r1 = result(x + 0.001, cost=np.full(600, 1e-4))
    r2 = result(rng.standard_normal(600) * 0.03)
    out = normalize_risk([r1, r2], 0.10, net=False)
    assert out[0].scale == pytest.approx(0.5, rel=1e-12)
    assert annualized_vol(out[0].pre_cost_pnl) == pytest.approx(annualized_vol(out[1].pre_cost_pnl), rel=1e-10)
    sr = lambda v: v.mean() / v.std()
    assert sr(out[0].pre_cost_pnl) == pytest.approx(sr(r1.pre_cost_pnl), rel=1e-12)
    np.testing.assert_allclose(out[0].costs, r1.costs * 0.5)
    with pytest.raises(DegenerateError):
        normalize_risk([result(np.zeros(300))])
    with pytest.raises(DataError):
        normalize_risk([result(rng.standard_normal(100))])
