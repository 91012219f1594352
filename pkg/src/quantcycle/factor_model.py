"""Multi-factor and single-index return models, Blume beta adjustment and
single-index risk decomposition."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .econometrics import CovarianceEstimate, add_intercept, covariance, ols
from .errors import DegenerateInputError, ValidationError
from .marketdata import FactorPanel, ReturnPanel

__all__ = [
    "FactorPanel", "FactorModelFit", "IndexFit", "fit_factor_model",
    "fit_single_index", "fit_index_model", "blume_adjust", "blume_betas",
    "security_variance", "security_covariance", "single_index_covariance",
    "portfolio_variance",
]


@dataclass(frozen=True)
class FactorModelFit:
    assets: tuple[str, ...]
    factors: tuple[str, ...]
    intercepts: np.ndarray
    loadings: np.ndarray
    specific_variance: np.ndarray
    factor_covariance: CovarianceEstimate
    residuals: np.ndarray
    r_squared: np.ndarray

    def __post_init__(self):
        if self.loadings.shape != (len(self.assets), len(self.factors)):
            raise ValidationError("loadings must be asset x factor")
        if np.any(self.specific_variance < 0):
            raise ValidationError("specific variance must be non-negative")

    def asset_covariance(self) -> np.ndarray:
        """B F B' + diag(specific variance)."""
        b = self.loadings
        return b @ self.factor_covariance.matrix @ b.T + np.diag(self.specific_variance)


@dataclass(frozen=True)
class IndexFit:
    assets: tuple[str, ...]
    alpha: np.ndarray
    beta: np.ndarray
    residual_variance: np.ndarray
    market_variance: float

    def __post_init__(self):
        for name in ("alpha", "beta", "residual_variance"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), float)))
        if not np.all(np.isfinite(self.beta)):
            raise ValidationError("beta must be finite")
        if np.any(self.residual_variance < 0):
            raise ValidationError("residual variance must be non-negative")
        if not (len(self.assets) == len(self.alpha) == len(self.beta) == len(self.residual_variance)):
            raise ValidationError("IndexFit fields must have one entry per asset")

    def index(self, asset) -> int:
        if isinstance(asset, (int, np.integer)):
            if not 0 <= asset < len(self.assets):
                raise ValidationError(f"unknown asset index {asset}")
            return int(asset)
        try:
            return self.assets.index(asset)
        except ValueError:
            raise ValidationError(f"unknown asset {asset!r}") from None

    def with_betas(self, betas) -> "IndexFit":
        return IndexFit(self.assets, self.alpha, np.asarray(betas, float),
                        self.residual_variance, self.market_variance)


def _check_alignment(returns: ReturnPanel, factors: FactorPanel) -> None:
    if tuple(returns.dates) != tuple(factors.dates):
        raise ValidationError("factor and return dates are not aligned")


def fit_factor_model(returns: ReturnPanel, factors: FactorPanel | None = None, *,
                     mode: str = "time_series", exposures=None) -> FactorModelFit:
    """Estimate ``R_it = a_i + sum_k b_ik F_kt + e_it``.

    ``mode="time_series"`` regresses each asset's return history on the factor
    values (with intercept). ``mode="cross_sectional"`` takes static
    ``exposures`` [asset x factor] as the loadings and regresses each date's
    cross-section on them to recover factor returns; ``a_i`` is then the mean
    of each asset's residual from the factor part.
    """
    if mode == "time_series":
        if factors is None:
            raise ValidationError("time-series mode needs a factor panel")
        _check_alignment(returns, factors)
        k = len(factors.factors)
        if len(returns) <= k + 1:
            raise DegenerateInputError("need more observations than factors + 1")
        X = add_intercept(factors.values)
        fits = [ols(X, returns.returns[:, i]) for i in range(len(returns.assets))]
        coef = np.array([f.coefficients for f in fits])
        resid = np.column_stack([f.residuals for f in fits])
        return FactorModelFit(
            returns.assets, factors.factors, coef[:, 0], coef[:, 1:],
            np.array([f.residual_variance for f in fits]),
            covariance(factors.values), resid, np.array([f.r_squared for f in fits]))
    if mode == "cross_sectional":
        if exposures is None:
            raise ValidationError("cross-sectional mode needs an exposure matrix")
        B = np.asarray(exposures, dtype=float)
        n = len(returns.assets)
        if B.ndim != 2 or B.shape[0] != n:
            raise ValidationError("exposures must be asset x factor")
        names = tuple(factors.factors) if factors is not None else tuple(
            f"F{j}" for j in range(B.shape[1]))
        if len(names) != B.shape[1]:
            raise ValidationError("factor names do not match exposure columns")
        X = add_intercept(B)
        rows = [ols(X, r) for r in returns.returns]
        fret = np.array([f.coefficients[1:] for f in rows])
        factor_part = fret @ B.T
        spec = returns.returns - factor_part
        a = spec.mean(axis=0)
        resid = spec - a
        dof = max(len(returns) - 1, 1)
        tss = ((returns.returns - returns.returns.mean(axis=0)) ** 2).sum(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            r2 = np.where(tss > 0, 1 - (resid ** 2).sum(axis=0) / tss, 1.0)
        return FactorModelFit(returns.assets, names, a, B.copy(),
                              (resid ** 2).sum(axis=0) / dof, covariance(fret), resid,
                              np.clip(r2, 0, 1))
    raise ValidationError(f"unknown estimation mode {mode!r}")


def fit_single_index(asset_returns, market_returns) -> tuple[float, float, float]:
    """Single-index fit of one asset: returns ``(alpha, beta, residual_variance)``.

    Beta is cov(R_i, R_m) / var(R_m) and alpha = mean(R_i) - beta mean(R_m);
    the regression route is computed too and must agree.
    """
    y = np.asarray(asset_returns, dtype=float)
    x = np.asarray(market_returns, dtype=float)
    if y.shape != x.shape or y.ndim != 1:
        raise ValidationError("asset and market returns must be equal-length vectors")
    if len(y) < 3:
        raise DegenerateInputError("single-index fit needs at least 3 observations")
    xm, ym = x.mean(), y.mean()
    var_m = ((x - xm) ** 2).sum() / (len(x) - 1)
    if var_m <= 0:
        raise DegenerateInputError("market variance is zero")
    cov_im = ((x - xm) * (y - ym)).sum() / (len(x) - 1)
    beta = cov_im / var_m
    alpha = ym - beta * xm
    reg = ols(add_intercept(x), y)
    scale = max(1.0, abs(beta))
    if abs(reg.coefficients[1] - beta) > 1e-8 * scale or abs(reg.coefficients[0] - alpha) > 1e-8 * max(1.0, abs(alpha)):
        raise ArithmeticError("moment and regression estimates of beta disagree")
    return float(alpha), float(beta), float(reg.residual_variance)


def fit_index_model(returns: ReturnPanel, market_returns) -> IndexFit:
    m = np.asarray(market_returns, dtype=float)
    if len(m) != len(returns):
        raise ValidationError("market returns must align with the return panel")
    out = np.array([fit_single_index(returns.returns[:, i], m)
                    for i in range(len(returns.assets))])
    return IndexFit(returns.assets, out[:, 0], out[:, 1], out[:, 2], float(np.var(m, ddof=1)))


def blume_adjust(betas_early, betas_late, betas_current) -> np.ndarray:
    """Blume correction: fit ``late = c0 + c1 * early`` across assets, apply to current."""
    early = np.asarray(betas_early, dtype=float)
    late = np.asarray(betas_late, dtype=float)
    cur = np.asarray(betas_current, dtype=float)
    if early.shape != late.shape or early.ndim != 1:
        raise ValidationError("early and late betas must be equal-length vectors")
    if len(early) < 3:
        raise DegenerateInputError("Blume adjustment needs at least 3 assets")
    if np.ptp(early) == 0:
        raise DegenerateInputError("early-period betas have zero variance")
    c = ols(add_intercept(early), late).coefficients
    return c[0] + c[1] * cur


def blume_betas(returns: ReturnPanel, market_returns, split: int | None = None) -> np.ndarray:
    """Blume-adjusted betas from a two-period split of the history.

    Without ``split`` the history is cut into equal halves; the later half's
    betas are the ones adjusted.
    """
    m = np.asarray(market_returns, dtype=float)
    n = len(returns)
    split = n // 2 if split is None else split
    if split < 3 or n - split < 3:
        raise DegenerateInputError("each Blume period needs at least 3 observations")
    early = fit_index_model(returns.slice(0, split), m[:split]).beta
    late = fit_index_model(returns.slice(split, n), m[split:]).beta
    return blume_adjust(early, late, late)


def security_variance(fit: IndexFit, asset) -> float:
    i = fit.index(asset)
    return float(fit.beta[i] ** 2 * fit.market_variance + fit.residual_variance[i])


def security_covariance(beta_i: float, beta_j: float, market_variance: float) -> float:
    return float(beta_i * beta_j * market_variance)


def single_index_covariance(fit: IndexFit) -> np.ndarray:
    """Full covariance matrix implied by the single-index model."""
    b = fit.beta
    return np.outer(b, b) * fit.market_variance + np.diag(fit.residual_variance)


def portfolio_variance(weights: Sequence[float], fit: IndexFit) -> float:
    w = np.asarray(weights, dtype=float)
    if w.shape != fit.beta.shape:
        raise ValidationError("weights length does not match the fit")
    if not np.all(np.isfinite(w)):
        raise ValidationError("weights must be finite")
    beta_p = w @ fit.beta
    return float(beta_p ** 2 * fit.market_variance + (w ** 2) @ fit.residual_variance)
