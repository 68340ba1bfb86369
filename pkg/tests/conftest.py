import numpy as np
import pandas as pd
import pytest

from portcon.data import MarketPanel, SyntheticSpec, generate_synthetic


def make_panel(returns, caps=None, adv=None, sectors=None, ids=None, start="2020-01-01", name="test"):
    """Panel built from a returns matrix; closes are integrated from 100."""
    r = np.asarray(returns, dtype=float)
    T, N = r.shape
    ids = ids or [f"S{i}" for i in range(N)]
    growth = np.vstack([np.ones((1, N)), 1.0 + np.nan_to_num(r[1:])])
    close = 100.0 * np.cumprod(growth, axis=0)
    r = r.copy()
    r[0] = np.nan
    if caps is None:
        caps = np.ones(N)
    caps = np.broadcast_to(np.asarray(caps, dtype=float), (T, N))
    if adv is None:
        adv = np.ones(N)
    adv = np.broadcast_to(np.asarray(adv, dtype=float), (T, N))
    return MarketPanel(
        dates=pd.bdate_range(start, periods=T),
        stock_ids=tuple(ids),
        close=close,
        total_return=r,
        market_cap=caps,
        adv=adv,
        sector=tuple(sectors or ["A"] * N),
        name=name,
    )


@pytest.fixture(scope="session")
def small_panel():
    return generate_synthetic(SyntheticSpec(n_stocks=40, n_days=800, seed=3), name="small")


@pytest.fixture(scope="session")
def alpha_panel():
    return generate_synthetic(
        SyntheticSpec(n_stocks=40, n_days=900, embedded_alpha=0.05, alpha_halflife=5, seed=4), name="alpha"
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance report ------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    """Register the outcome of acceptance criterion ``n`` for the summary."""
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
