import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from portcon.data import (
    MarketPanel,
    SyntheticSpec,
    generate_synthetic,
    load_panel,
    select_universe,
    write_panel_csv,
)
from portcon.errors import (
    ConfigError,
    DataError,
    DuplicationError,
    OrderingError,
    SchemaError,
    WarmupError,
)

HEADER = "date,stock_id,close,total_return,market_cap,adv,sector\n"


def write(tmp_path, body, name="prices.csv", header=HEADER):
    p = tmp_path / name
    p.write_text(header + body, encoding="utf-8")
    return p


def test_minimal_csv(tmp_path):
    p = write(
        tmp_path,
        "2021-01-04,A,10,,100,5,X\n2021-01-04,B,20,,200,5,Y\n"
        "2021-01-05,A,11,,100,5,X\n2021-01-05,B,19,,200,5,Y\n"
        "2021-01-06,A,12.1,,100,5,X\n2021-01-06,B,19,,200,5,Y\n",
    )
    panel = load_panel(p)
    assert panel.close.shape == (3, 2)
    assert np.isnan(panel.total_return[0]).all()
    np.testing.assert_allclose(panel.total_return[1:, 0], [0.1, 0.1])
    np.testing.assert_allclose(panel.total_return[1:, 1], [-0.05, 0.0])
    assert panel.sector == ("X", "Y")


def test_missing_close_propagates(tmp_path):
    p = write(
        tmp_path,
        "2021-01-04,A,10,,1,1,X\n2021-01-05,A,,,1,1,X\n2021-01-06,A,12,,1,1,X\n2021-01-07,A,13,,1,1,X\n",
    )
    panel = load_panel(p)
    assert not panel.present[1, 0]
    assert np.isnan(panel.total_return[1, 0]) and np.isnan(panel.total_return[2, 0])
    assert panel.total_return[3, 0] == pytest.approx(13 / 12 - 1)


def test_given_total_return_wins(tmp_path):
    p = write(tmp_path, "2021-01-04,A,10,,1,1,X\n2021-01-05,A,10,0.02,1,1,X\n")
    assert load_panel(p).total_return[1, 0] == pytest.approx(0.02)


def test_out_of_order_dates(tmp_path):
    p = write(tmp_path, "2021-01-05,A,10,,1,1,X\n2021-01-04,A,11,,1,1,X\n")
    with pytest.raises(OrderingError, match=r"prices.csv:3"):
        load_panel(p)


def test_duplicate_rows(tmp_path):
    p = write(tmp_path, "2021-01-04,A,10,,1,1,X\n2021-01-04,A,11,,1,1,X\n")
    with pytest.raises(DuplicationError, match="line 2"):
        load_panel(p)


def test_malformed_header(tmp_path):
    p = write(tmp_path, "2021-01-04,A,10,1,1\n", header="date,stock_id,close,cap,adv\n")
    with pytest.raises(SchemaError, match="missing"):
        load_panel(p)


def test_unparseable_value_location(tmp_path):
    p = write(tmp_path, "2021-01-04,A,10,,1,1,X\n2021-01-05,A,abc,,1,1,X\n")
    with pytest.raises(SchemaError, match=r"prices.csv:3: column 'close'"):
        load_panel(p)


def test_nonpositive_cap_rejected(tmp_path):
    p = write(tmp_path, "2021-01-04,A,10,,0,1,X\n")
    with pytest.raises(DataError, match="market_cap"):
        load_panel(p)


def test_fundamentals_point_in_time(tmp_path):
    p = write(tmp_path, "".join(f"2021-01-{d:02d},A,10,,1,1,X\n" for d in (4, 5, 6, 7)))
    f = tmp_path / "fund.csv"
    f.write_text("report_date,stock_id,field,value\n2021-01-05,A,net_income,10\n2021-01-05,A,total_assets,100\n")
    panel = load_panel(p, f)
    assert np.isnan(panel.fundamental_asof("net_income", "2021-01-05")[0])
    assert panel.fundamental_asof("net_income", "2021-01-06")[0] == 10


def test_fundamentals_unknown_field(tmp_path):
    p = write(tmp_path, "2021-01-04,A,10,,1,1,X\n")
    f = tmp_path / "fund.csv"
    f.write_text("report_date,stock_id,field,value\n2021-01-01,A,revenue,1\n")
    with pytest.raises(SchemaError, match="revenue"):
        load_panel(p, f)


def test_csv_roundtrip(tmp_path):
    panel = generate_synthetic(SyntheticSpec(n_stocks=5, n_days=30, seed=2))
    write_panel_csv(panel, tmp_path / "p.csv", tmp_path / "f.csv")
    back = load_panel(tmp_path / "p.csv", tmp_path / "f.csv")
    np.testing.assert_array_equal(back.close, panel.close)
    np.testing.assert_allclose(back.total_return, panel.total_return, equal_nan=True)
    assert back.sector == panel.sector
    a = panel.fundamental_asof("total_assets", panel.dates[-1])
    np.testing.assert_array_equal(back.fundamental_asof("total_assets", panel.dates[-1]), a)


def test_synthetic_degenerate_identical_series():
    spec = SyntheticSpec(n_stocks=5, n_days=200, idio_vol=1e-12, sector_vol=1e-12, market_beta_dispersion=0.0)
    r = generate_synthetic(spec).total_return[1:]
    assert np.max(np.abs(r - r[:, :1])) < 1e-12


def test_synthetic_independent_when_no_common_factors():
    spec = SyntheticSpec(n_stocks=6, n_days=5000, market_vol=1e-12, sector_vol=1e-12, seed=9)
    r = generate_synthetic(spec).total_return[1:]
    c = np.corrcoef(r, rowvar=False)
    assert np.max(np.abs(c[np.triu_indices(6, 1)])) < 0.1


def test_synthetic_deterministic():
    spec = SyntheticSpec(n_stocks=10, n_days=100, embedded_alpha=0.1, seed=5)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    for f in ("close", "total_return", "market_cap", "adv", "alpha"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    pd.testing.assert_frame_equal(a.fundamentals, b.fundamentals)
    assert generate_synthetic(SyntheticSpec(n_stocks=10, n_days=100, seed=6)).close.tobytes() != a.close.tobytes()


def test_synthetic_sectors_round_robin():
    panel = generate_synthetic(SyntheticSpec(n_stocks=7, n_days=10, n_sectors=3))
    assert panel.sector == ("SEC0", "SEC1", "SEC2", "SEC0", "SEC1", "SEC2", "SEC0")


@pytest.mark.parametrize("bad", [{"idio_vol": 0.0}, {"n_sectors": 0}, {"market_vol": -1.0}])
def test_synthetic_spec_validation(bad):
    with pytest.raises(ConfigError):
        SyntheticSpec(**bad)


def test_panel_is_read_only(small_panel):
    with pytest.raises(ValueError):
        small_panel.close[0, 0] = 1.0


def _adv_panel(adv, caps=None, n_days=130):
    from conftest import make_panel

    n = len(adv)
    return make_panel(np.zeros((n_days, n)), caps=caps, adv=adv, ids=[chr(65 + i) for i in range(n)])


def test_universe_ranks_by_adv():
    u = select_universe(_adv_panel([3.0, 2.0, 0.0]), liquidity_size=2)
    assert all(m == ("A", "B") for m in u.members)


def test_universe_cap_prefilter():
    # C is the most liquid but the smallest cap
    u = select_universe(_adv_panel([1.0, 2.0, 3.0], caps=[10.0, 20.0, 1.0]), liquidity_size=2, cap_filter_size=2)
    assert all(m == ("A", "B") for m in u.members)


def test_universe_ties_by_id():
    u = select_universe(_adv_panel([1.0, 1.0, 1.0]), liquidity_size=2)
    assert u.members[0] == ("A", "B")


def test_universe_warmup_reported():
    u = select_universe(_adv_panel([1.0, 2.0], n_days=130), liquidity_size=1)
    assert "2020Q1" in u.skipped and u.quarters[0] == pd.Period("2020Q2")
    with pytest.raises(WarmupError):
        select_universe(_adv_panel([1.0, 2.0], n_days=40), liquidity_size=1)


def test_universe_delisted_still_selected():
    from conftest import make_panel

    T = 200
    adv = np.tile([5.0, 1.0, 2.0], (T, 1))
    panel = make_panel(np.zeros((T, 3)), adv=adv, ids=["A", "B", "C"])
    close = panel.close.copy()
    q2 = int(panel.dates.searchsorted(pd.Timestamp("2020-04-01")))
    close[q2 + 5 :, 0] = np.nan
    panel2 = MarketPanel(panel.dates, panel.stock_ids, close, panel.total_return, panel.market_cap, adv, panel.sector)
    u = select_universe(panel2, 2)
    assert "A" in u.members_at("2020-05-15")
    assert not panel2.present[q2 + 10, 0]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_universe_causal(seed, quarter):
    rng = np.random.default_rng(seed)
    T, N = 400, 8
    adv = rng.lognormal(size=(T, N))
    panel = _adv_panel(np.ones(N), n_days=T)
    base = MarketPanel(panel.dates, panel.stock_ids, panel.close, panel.total_return, panel.market_cap, adv, panel.sector)
    u = select_universe(base, 3)
    if quarter >= len(u.quarters):
        return
    q = u.quarters[quarter]
    cut = int(base.dates.searchsorted(q.start_time))
    adv2 = adv.copy()
    adv2[cut:] = rng.lognormal(size=(T - cut, N))
    mutated = MarketPanel(base.dates, base.stock_ids, base.close, base.total_return, base.market_cap, adv2, base.sector)
    u2 = select_universe(mutated, 3)
    assert u2.members[: quarter + 1] == u.members[: quarter + 1]
    assert all(len(m) <= 3 for m in u2.members)


def test_index_returns_cap_weighted():
    from conftest import make_panel

    r = np.array([[np.nan, np.nan], [0.01, 0.03], [0.02, -0.02]])
    panel = make_panel(r, caps=[1.0, 3.0])
    np.testing.assert_allclose(panel.index_returns[1:], [0.025, -0.01])
