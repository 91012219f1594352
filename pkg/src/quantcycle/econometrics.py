"""Shared numerical primitives: least squares, rank correlation, covariance."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import DegenerateInputError, RankDeficiencyError, ValidationError

log = logging.getLogger(__name__)

CONDITION_WARNING = 1e10
RIDGE_SCALE = 1e-10


@dataclass(frozen=True)
class RegressionFit:
    coefficients: np.ndarray
    residuals: np.ndarray
    coefficient_standard_errors: np.ndarray
    t_statistics: np.ndarray
    r_squared: float
    residual_variance: float

    @property
    def n_obs(self) -> int:
        return len(self.residuals)


def ols(design, response) -> RegressionFit:
    """Ordinary least squares of ``response`` on the columns of ``design``.

    The design is used as given: include a column of ones for an intercept.
    Residual variance uses the ``n - k`` denominator.

    Raises
    ------
    RankDeficiencyError
        If the design does not have full column rank.
    DegenerateInputError
        If there are not more observations than regressors.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    if y.shape != (n,):
        raise ValidationError(f"response length {y.shape} does not match design rows {n}")
    if n <= k:
        raise DegenerateInputError(f"need more observations ({n}) than regressors ({k})")
    # column scaling keeps the rank test meaningful for regressors of very different size
    scale = np.linalg.norm(X, axis=0)
    if np.any(scale == 0):
        raise RankDeficiencyError("design has an all-zero column")
    Xs = X / scale
    q, r = np.linalg.qr(Xs)
    diag = np.abs(np.diag(r))
    if diag.min() <= max(n, k) * np.finfo(float).eps * diag.max() * 10:
        raise RankDeficiencyError("design matrix is rank deficient")
    cond = np.linalg.cond(Xs)
    if cond > CONDITION_WARNING:
        log.warning("design matrix is ill-conditioned (condition number %.3g)", cond)
    beta_s = np.linalg.solve(r, q.T @ y)
    beta = beta_s / scale
    resid = y - X @ beta
    # one Newton refinement step tightens orthogonality of the residuals
    beta = beta + np.linalg.solve(r, q.T @ resid) / scale
    resid = y - X @ beta
    dof = n - k
    s2 = float(resid @ resid) / dof
    rinv = np.linalg.inv(r)
    cov = s2 * (rinv @ rinv.T) / np.outer(scale, scale)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        tstat = beta / se
    tss = float(((y - y.mean()) ** 2).sum())
    rss = float(resid @ resid)
    r2 = 1.0 - rss / tss if tss > 0 else 1.0
    return RegressionFit(beta, resid, se, tstat, float(np.clip(r2, 0.0, 1.0)), s2)


def add_intercept(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.column_stack([np.ones(len(x)), x])


def spearman(a, b) -> float:
    """Spearman rank correlation with average ranks for ties."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("spearman needs two 1-d vectors of equal length")
    if len(a) < 2:
        raise DegenerateInputError("spearman needs at least 2 observations")
    ra = stats.rankdata(a)
    rb = stats.rankdata(b)
    da = ra - ra.mean()
    db = rb - rb.mean()
    va, vb = da @ da, db @ db
    if va == 0 or vb == 0:
        raise DegenerateInputError("zero rank variance")
    rho = (da @ db) / np.sqrt(va * vb)
    return float(np.clip(rho, -1.0, 1.0))


@dataclass(frozen=True)
class CovarianceEstimate:
    matrix: np.ndarray
    mean_vector: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError("covariance must be square")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "mean_vector", np.asarray(self.mean_vector, dtype=float))


def covariance(returns) -> CovarianceEstimate:
    """Sample covariance (n - 1 denominator) of a ReturnPanel or [obs x asset] matrix."""
    x = np.asarray(getattr(returns, "returns", returns), dtype=float)
    if x.ndim != 2:
        raise ValidationError("covariance expects a 2-d observation matrix")
    if x.shape[0] < 2:
        raise DegenerateInputError("covariance needs at least 2 observations")
    mean = x.mean(axis=0)
    d = x - mean
    cov = d.T @ d / (x.shape[0] - 1)
    cov = 0.5 * (cov + cov.T)
    return CovarianceEstimate(cov, mean)


def ridge(matrix, scale: float = RIDGE_SCALE) -> float:
    m = np.asarray(matrix, dtype=float)
    return scale * max(np.trace(m) / len(m), np.finfo(float).tiny)


def condition_covariance(matrix, max_condition: float = CONDITION_WARNING,
                         scale: float = RIDGE_SCALE) -> np.ndarray:
    """Symmetrise and, if near-singular, add ``eps * I`` with ``eps = scale * trace / n``.

    Well-conditioned matrices come back unchanged (bit for bit after symmetrisation).
    """
    m = np.asarray(matrix, dtype=float)
    m = 0.5 * (m + m.T)
    eig = np.linalg.eigvalsh(m)
    if eig[0] < -1e-10 * max(abs(eig[-1]), 1.0):
        raise DegenerateInputError(f"covariance is not PSD (min eigenvalue {eig[0]:.3g})")
    if eig[-1] <= 0:
        raise DegenerateInputError("covariance is identically zero")
    if eig[0] <= eig[-1] / max_condition:
        log.warning("conditioning near-singular covariance with ridge")
        m = m + ridge(m, scale) * np.eye(len(m))
    return m


def is_psd(matrix, tol: float = 1e-10) -> bool:
    m = np.asarray(matrix, dtype=float)
    if not np.allclose(m, m.T, atol=1e-12, rtol=0):
        return False
    return bool(np.linalg.eigvalsh(m)[0] >= -tol)
