"""Empirical correlations, eigenvalue clipping and stock betas.

The cleaned model keeps the top ``k`` eigenpairs of the correlation matrix and
replaces the remaining spectrum with a flat residual ``eps2`` chosen so the
total variance is preserved, ``Tr C = sum_i sigma_i^2``::

    C_ij = sigma_i sigma_j (sum_a lambda_a v_a,i v_a,j + eps2 delta_ij)

Products with ``C`` and ``C^-1`` are evaluated from this representation in
O(N k) without forming a dense matrix.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .data import MarketPanel
from .errors import EstimationError, ParameterError, WarmupError

__all__ = [
    "BetaVector",
    "CorrelationEstimate",
    "SpectralCovariance",
    "apply_covariance",
    "apply_inverse",
    "clip_spectrum",
    "compute_beta",
    "estimate_correlation",
    "first_factor_beta",
    "nearest_correlation",
]

DEFAULT_WINDOW = 500
MIN_OBS = 60
PSD_TOL = 1e-8


@dataclass(frozen=True)
class CorrelationEstimate:
    stock_ids: tuple[str, ...]
    correlation: np.ndarray
    sigma: np.ndarray
    window: int
    excluded: tuple[str, ...] = ()
    projected: bool = False


def _row(panel: MarketPanel, date) -> int:
    if isinstance(date, (int, np.integer)):
        return int(date)
    return int(panel.dates.searchsorted(pd.Timestamp(date), side="left"))


def nearest_correlation(corr: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    """Clip negative eigenvalues and rescale back to a unit diagonal."""
    vals, vecs = np.linalg.eigh(corr)
    fixed = (vecs * np.maximum(vals, floor)) @ vecs.T
    d = np.sqrt(np.diag(fixed))
    fixed = fixed / np.outer(d, d)
    fixed = 0.5 * (fixed + fixed.T)
    np.fill_diagonal(fixed, 1.0)
    return fixed


def estimate_correlation(
    panel: MarketPanel,
    stock_ids: Sequence[str],
    date,
    window: int = DEFAULT_WINDOW,
    min_obs: int = MIN_OBS,
) -> CorrelationEstimate:
    """Correlation and daily volatility from the ``window`` returns strictly before ``date``.

    ``date`` is a timestamp or a panel row index. Missing returns are handled
    pairwise: each pair uses the days both stocks have, pairs with fewer than
    ``min_obs`` common days get zero correlation, and the result is projected
    onto the nearest correlation matrix when it is not PSD within 1e-8.
    Stocks with fewer than ``min_obs`` returns are dropped and reported in
    ``excluded``.
    """
    end = _row(panel, date)
    if end < window:
        raise WarmupError(f"{panel.name}: {end} rows before {date}, need a window of {window}")
    cols = panel.columns(stock_ids)
    block = panel.total_return[end - window : end, cols]
    counts = (~np.isnan(block)).sum(axis=0)
    keep = counts >= min_obs
    ids = tuple(s for s, k in zip(stock_ids, keep) if k)
    excluded = tuple(s for s, k in zip(stock_ids, keep) if not k)
    if len(ids) < 2:
        raise EstimationError(f"{panel.name}: fewer than 2 stocks with {min_obs} returns before {date}")
    block = block[:, keep]
    sigma = np.nanstd(block, axis=0, ddof=1)
    if np.any(sigma <= 0):
        bad = [s for s, v in zip(ids, sigma) if v <= 0]
        raise EstimationError(f"{panel.name}: zero volatility for {bad}")

    if not np.isnan(block).any():
        corr = np.corrcoef(block, rowvar=False)
    else:
        corr = pd.DataFrame(block).corr(min_periods=min_obs).to_numpy()
        corr = np.nan_to_num(corr, nan=0.0)
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    projected = False
    if np.linalg.eigvalsh(corr)[0] < -PSD_TOL:
        corr = nearest_correlation(corr)
        projected = True
    return CorrelationEstimate(ids, corr, sigma, window, excluded, projected)


@dataclass(frozen=True)
class SpectralCovariance:
    """Top-``k`` eigenpairs of the correlation matrix plus a flat residual.

    ``eigenvectors`` is ``(N, k)`` with unit-norm orthogonal columns sorted by
    descending eigenvalue; ``sigma`` holds daily volatilities.
    """

    stock_ids: tuple[str, ...]
    sigma: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    epsilon2: float
    window: int | None = None
    discarded: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def k(self) -> int:
        return len(self.eigenvalues)

    @property
    def n(self) -> int:
        return len(self.sigma)

    def correlation_matrix(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T + self.epsilon2 * np.eye(self.n)

    def matrix(self) -> np.ndarray:
        return self.correlation_matrix() * np.outer(self.sigma, self.sigma)

    def apply(self, y: np.ndarray) -> np.ndarray:
        return apply_covariance(self, y)

    def solve(self, y: np.ndarray) -> np.ndarray:
        return apply_inverse(self, y)

    def to_dict(self) -> dict:
        return {
            "stock_ids": list(self.stock_ids),
            "sigma": self.sigma.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "eigenvectors": self.eigenvectors.T.tolist(),
            "epsilon2": self.epsilon2,
            "k": self.k,
            "estimation_window": self.window,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpectralCovariance":
        return cls(
            stock_ids=tuple(d["stock_ids"]),
            sigma=np.asarray(d["sigma"], dtype=float),
            eigenvalues=np.asarray(d["eigenvalues"], dtype=float),
            eigenvectors=np.asarray(d["eigenvectors"], dtype=float).reshape(len(d["eigenvalues"]), -1).T,
            epsilon2=float(d["epsilon2"]),
            window=d.get("estimation_window"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "SpectralCovariance":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _orient(vecs: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def clip_spectrum(
    correlation: np.ndarray,
    sigma: np.ndarray,
    k: int,
    *,
    stock_ids: Sequence[str] | None = None,
    window: int | None = None,
) -> SpectralCovariance:
    corr = np.asarray(correlation, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    n = corr.shape[0]
    if corr.shape != (n, n) or sigma.shape != (n,):
        raise ParameterError(f"correlation {corr.shape} and sigma {sigma.shape} do not match")
    if not 1 <= k < n:
        raise ParameterError(f"k must satisfy 1 <= k < N, got k={k}, N={n}")
    if not np.allclose(corr, corr.T, atol=1e-10, rtol=0):
        raise EstimationError("correlation matrix is not symmetric")
    if not np.allclose(np.diag(corr), 1.0, atol=1e-10, rtol=0):
        raise EstimationError("correlation matrix must have a unit diagonal")
    if np.any(sigma <= 0):
        raise EstimationError("volatilities must be positive")

    vals, vecs = np.linalg.eigh(0.5 * (corr + corr.T))
    if vals[0] < -PSD_TOL * n:
        raise EstimationError(f"correlation matrix is not PSD (smallest eigenvalue {vals[0]:.3g})")
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    top = vals[:k]
    if top[-1] <= 0:
        raise EstimationError(f"eigenvalue {k} is not positive ({top[-1]:.3g})")
    # residual chosen so that Tr C = sum sigma_i^2; for equal volatilities
    # this is (N - sum of kept eigenvalues) / N
    s2 = sigma**2
    kept_diag = (vecs[:, :k] ** 2) @ top
    eps2 = float((s2.sum() - s2 @ kept_diag) / s2.sum())
    if eps2 <= 0:
        raise EstimationError(f"no residual variance left after keeping {k} factors (eps2={eps2:.3g})")
    if stock_ids is None:
        stock_ids = tuple(str(i) for i in range(n))
    return SpectralCovariance(
        stock_ids=tuple(stock_ids),
        sigma=sigma.copy(),
        eigenvalues=top.copy(),
        eigenvectors=_orient(vecs[:, :k]).copy(),
        epsilon2=float(eps2),
        window=window,
        discarded=vals[k:].copy(),
    )


def fit_model(est: CorrelationEstimate, k: int) -> SpectralCovariance:
    return clip_spectrum(est.correlation, est.sigma, k, stock_ids=est.stock_ids, window=est.window)


def apply_covariance(model: SpectralCovariance, y: np.ndarray) -> np.ndarray:
    z = model.sigma * np.asarray(y, dtype=float)
    v = model.eigenvectors
    return model.sigma * (v @ (model.eigenvalues * (v.T @ z)) + model.epsilon2 * z)


def apply_inverse(model: SpectralCovariance, y: np.ndarray) -> np.ndarray:
    """``C^-1 y`` via the Woodbury identity on the retained factors."""
    z = np.asarray(y, dtype=float) / model.sigma
    v, lam, e2 = model.eigenvectors, model.eigenvalues, model.epsilon2
    shrink = lam / (lam + e2)
    u = (z - v @ (shrink * (v.T @ z))) / e2
    return u / model.sigma


@dataclass(frozen=True)
class BetaVector:
    stock_ids: tuple[str, ...]
    beta: np.ndarray
    source: str
    window: int | None = None

    def subset(self, ids: Sequence[str]) -> np.ndarray:
        pos = {s: i for i, s in enumerate(self.stock_ids)}
        return self.beta[[pos[s] for s in ids]]


def regression_beta(returns: np.ndarray, index: np.ndarray, min_obs: int = MIN_OBS) -> np.ndarray:
    """OLS slope of each column of ``returns`` on ``index`` over pairwise-valid rows."""
    returns = np.asarray(returns, dtype=float)
    index = np.asarray(index, dtype=float)
    ok = ~np.isnan(returns) & ~np.isnan(index)[:, None]
    n = ok.sum(axis=0)
    x = np.where(ok, index[:, None], 0.0)
    y = np.where(ok, returns, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mx = x.sum(axis=0) / n
        my = y.sum(axis=0) / n
        cov = (np.where(ok, (x - mx) * (y - my), 0.0)).sum(axis=0)
        var = (np.where(ok, (x - mx) ** 2, 0.0)).sum(axis=0)
        beta = cov / var
    scale = np.nanmax(np.abs(index)) if np.any(~np.isnan(index)) else 0.0
    degenerate = var <= (1e-14 * scale) ** 2 * np.maximum(n, 1)
    if np.all(degenerate | (n < min_obs)):
        raise EstimationError("index variance is zero over the regression window")
    beta[(n < min_obs) | degenerate] = np.nan
    return beta


def first_factor_beta(model: SpectralCovariance, caps: np.ndarray | None = None) -> BetaVector:
    """``sigma_i sqrt(lambda_1) v_1,i`` rescaled to a cap-weighted mean of one."""
    raw = model.sigma * np.sqrt(model.eigenvalues[0]) * model.eigenvectors[:, 0]
    w = np.ones_like(raw) if caps is None else np.asarray(caps, dtype=float)
    w = w / w.sum()
    mean = float(w @ raw)
    if abs(mean) <= 0:
        raise EstimationError("first factor has zero cap-weighted loading")
    return BetaVector(model.stock_ids, raw / mean, "first-factor", model.window)


def compute_beta(
    panel: MarketPanel,
    stock_ids: Sequence[str],
    date,
    method: str = "regression",
    window: int = 252,
    *,
    model: SpectralCovariance | None = None,
    index_returns: np.ndarray | None = None,
) -> BetaVector:
    """Stock betas from returns strictly before ``date``.

    ``regression`` regresses on the panel's cap-weighted index (or on the
    supplied ``index_returns``, aligned with panel rows); ``first-factor``
    uses a fitted model's market mode.
    """
    end = _row(panel, date)
    if method == "regression":
        if end < window:
            raise WarmupError(f"{panel.name}: {end} rows before {date}, beta regression needs {window}")
        idx = panel.index_returns if index_returns is None else np.asarray(index_returns, dtype=float)
        cols = panel.columns(stock_ids)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            beta = regression_beta(panel.total_return[end - window : end, cols], idx[end - window : end])
        return BetaVector(tuple(stock_ids), beta, "regression", window)
    if method == "first-factor":
        if model is None:
            est = estimate_correlation(panel, stock_ids, end, window=window)
            model = fit_model(est, 1)
        caps = panel.market_cap[end - 1, panel.columns(model.stock_ids)] if end >= 1 else None
        return first_factor_beta(model, caps)
    raise ParameterError(f"unknown beta method {method!r}; use 'regression' or 'first-factor'")
