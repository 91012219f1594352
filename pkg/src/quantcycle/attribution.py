"""Performance measurement and attribution."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .econometrics import add_intercept, ols
from .errors import DegenerateInputError, ValidationError
from .factor_model import FactorModelFit
from .marketdata import FactorPanel, ReturnPanel

SEGMENT_COLUMNS = ("period", "segment", "w_p", "r_p", "w_b", "r_b")
CURRENCY_COLUMNS = ("period", "asset_id", "local_return", "currency_return", "local_rf", "base_rf")


@dataclass(frozen=True)
class PerformanceInput:
    portfolio_returns: np.ndarray
    benchmark_returns: np.ndarray
    risk_free: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.portfolio_returns, dtype=float)
        b = np.asarray(self.benchmark_returns, dtype=float)
        rf = np.broadcast_to(np.asarray(self.risk_free, dtype=float), p.shape).copy()
        if p.ndim != 1 or p.shape != b.shape:
            raise ValidationError("portfolio and benchmark series must have equal length")
        if len(p) < 3:
            raise DegenerateInputError("performance measurement needs at least 3 periods")
        object.__setattr__(self, "portfolio_returns", p)
        object.__setattr__(self, "benchmark_returns", b)
        object.__setattr__(self, "risk_free", rf)

    @property
    def periods(self) -> int:
        return len(self.portfolio_returns)

    @property
    def excess_portfolio(self) -> np.ndarray:
        return self.portfolio_returns - self.risk_free

    @property
    def excess_benchmark(self) -> np.ndarray:
        return self.benchmark_returns - self.risk_free


@dataclass(frozen=True)
class RiskAdjustedReport:
    sharpe: float
    treynor: float
    jensen_alpha: float
    alpha_information_ratio: float
    alpha_t_stat: float
    win_rate: float
    benchmark_correlation: float
    beta: float
    alpha_standard_error: float
    residual_std: float
    max_drawdown: float
    periods: int

    def as_dict(self) -> dict:
        return asdict(self)


def max_drawdown(returns) -> float:
    """Largest peak-to-trough fall of cumulative wealth, as a positive fraction."""
    wealth = np.concatenate([[1.0], np.cumprod(1.0 + np.asarray(returns, dtype=float))])
    peak = np.maximum.accumulate(wealth)
    return float(np.max(1.0 - wealth / peak))


def _ratio(num: float, den: float, scale: float = 1.0) -> float:
    """num / den, with round-off-sized denominators treated as zero."""
    if abs(den) <= 1e-13 * scale:
        return math.nan if abs(num) <= 1e-13 * scale else math.copysign(math.inf, num)
    return num / den


def risk_adjusted_measures(inp: PerformanceInput) -> RiskAdjustedReport:
    """Sharpe, Treynor, Jensen's alpha, alpha IR and t-stat, win rate, correlation.

    Alpha, beta and the residual standard deviation come from OLS of portfolio
    excess returns on benchmark excess returns. Jensen's alpha is also computed
    from the CAPM identity and checked against the intercept.
    """
    yp, xm = inp.excess_portfolio, inp.excess_benchmark
    sd_p = float(np.std(inp.portfolio_returns, ddof=1))
    if sd_p == 0:
        raise DegenerateInputError("portfolio return volatility is zero; Sharpe ratio undefined")
    if np.ptp(xm) == 0:
        raise DegenerateInputError("benchmark excess returns are constant; beta undefined")
    fit = ols(add_intercept(xm), yp)
    alpha, beta = (float(c) for c in fit.coefficients)
    jensen = float(yp.mean() - beta * xm.mean())
    if abs(jensen - alpha) > 1e-12 * max(1.0, abs(alpha)) + 1e-15:
        raise ArithmeticError("Jensen's alpha disagrees with the regression intercept")
    sigma_e = math.sqrt(fit.residual_variance)
    n = inp.periods
    corr = float(np.corrcoef(inp.portfolio_returns, inp.benchmark_returns)[0, 1]) \
        if np.ptp(inp.benchmark_returns) > 0 else math.nan
    return RiskAdjustedReport(
        sharpe=float(yp.mean() / sd_p),
        treynor=_ratio(float(yp.mean()), beta),
        jensen_alpha=jensen,
        alpha_information_ratio=_ratio(jensen, sigma_e, sd_p),
        alpha_t_stat=_ratio(jensen * math.sqrt(n), sigma_e, sd_p),
        win_rate=float(np.mean(inp.portfolio_returns > inp.benchmark_returns)),
        benchmark_correlation=corr,
        beta=beta,
        alpha_standard_error=float(fit.coefficient_standard_errors[0]),
        residual_std=sigma_e,
        max_drawdown=max_drawdown(inp.portfolio_returns),
        periods=n)


@dataclass(frozen=True)
class TimingResult:
    a: float
    b: float
    c: float
    t_stat_c: float
    standard_errors: tuple[float, float, float]
    r_squared: float


def timing_regression(inp: PerformanceInput) -> TimingResult:
    """Quadratic market-timing regression of excess on excess and squared excess."""
    if inp.periods < 4:
        raise DegenerateInputError("timing regression needs at least 4 periods")
    x = inp.excess_benchmark
    if np.ptp(x) == 0:
        raise DegenerateInputError("benchmark excess returns are constant")
    fit = ols(np.column_stack([np.ones_like(x), x, x ** 2]), inp.excess_portfolio)
    a, b, c = (float(v) for v in fit.coefficients)
    return TimingResult(a, b, c, float(fit.t_statistics[2]),
                        tuple(float(s) for s in fit.coefficient_standard_errors), fit.r_squared)


@dataclass(frozen=True)
class SegmentData:
    segments: tuple[str, ...]
    w_p: np.ndarray
    r_p: np.ndarray
    w_b: np.ndarray
    r_b: np.ndarray

    def __post_init__(self):
        arrs = [np.asarray(getattr(self, k), dtype=float) for k in ("w_p", "r_p", "w_b", "r_b")]
        n = len(self.segments)
        if any(a.shape != (n,) for a in arrs):
            raise ValidationError("segment arrays must have one entry per segment")
        for k, a in zip(("w_p", "r_p", "w_b", "r_b"), arrs):
            object.__setattr__(self, k, a)
        if abs(arrs[0].sum() - 1) > 1e-9 or abs(arrs[2].sum() - 1) > 1e-9:
            raise ValidationError("portfolio and benchmark segment weights must each sum to 1")


@dataclass(frozen=True)
class BrinsonResult:
    segments: tuple[str, ...]
    allocation: np.ndarray
    selection: np.ndarray
    interaction: np.ndarray
    portfolio_return: float
    benchmark_return: float

    @property
    def active_return(self) -> float:
        return self.portfolio_return - self.benchmark_return

    @property
    def totals(self) -> dict[str, float]:
        return {"allocation": float(self.allocation.sum()),
                "selection": float(self.selection.sum()),
                "interaction": float(self.interaction.sum())}


def brinson(seg: SegmentData, relative_allocation: bool = False) -> BrinsonResult:
    """Allocation / selection / interaction per segment.

    ``relative_allocation`` measures allocation against ``r_b - R_b`` rather
    than ``r_b``; totals are identical either way.
    """
    rp_tot = float(seg.w_p @ seg.r_p)
    rb_tot = float(seg.w_b @ seg.r_b)
    dw = seg.w_p - seg.w_b
    dr = seg.r_p - seg.r_b
    bench = seg.r_b - rb_tot if relative_allocation else seg.r_b
    return BrinsonResult(seg.segments, dw * bench, seg.w_b * dr, dw * dr, rp_tot, rb_tot)


@dataclass(frozen=True)
class StyleResult:
    styles: tuple[str, ...]
    intercept: float
    exposures: np.ndarray
    standard_errors: np.ndarray
    r_squared: float


def style_regression(portfolio_returns, style_returns, styles: Sequence[str] | None = None) -> StyleResult:
    y = np.asarray(portfolio_returns, dtype=float)
    x = np.asarray(style_returns, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if len(y) <= x.shape[1] + 1:
        raise DegenerateInputError("style regression needs more observations than styles + 1")
    fit = ols(add_intercept(x), y)
    names = tuple(styles) if styles is not None else tuple(f"style{k}" for k in range(x.shape[1]))
    return StyleResult(names, float(fit.coefficients[0]), fit.coefficients[1:],
                       fit.coefficient_standard_errors[1:], fit.r_squared)


@dataclass(frozen=True)
class FactorAttribution:
    dates: tuple
    factors: tuple[str, ...]
    contributions: np.ndarray      # [T x K]
    intercept: float
    specific: np.ndarray           # [T]
    portfolio_returns: np.ndarray  # [T]


def factor_attribution(fit: FactorModelFit, realized_factors: FactorPanel, weights,
                       returns: ReturnPanel) -> FactorAttribution:
    """Split portfolio returns into (w'B)_k F_kt, the weighted intercept and a specific part."""
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(fit.assets),):
        raise ValidationError("weights must have one entry per asset in the fit")
    if tuple(realized_factors.factors) != tuple(fit.factors):
        raise ValidationError("realised factors do not match the fitted factors")
    if tuple(returns.assets) != tuple(fit.assets):
        raise ValidationError("return panel universe does not match the fit")
    if tuple(returns.dates) != tuple(realized_factors.dates):
        raise ValidationError("factor and return dates are not aligned")
    exposure = w @ fit.loadings
    contrib = realized_factors.values * exposure
    intercept = float(w @ fit.intercepts)
    rp = returns.returns @ w
    specific = rp - contrib.sum(axis=1) - intercept
    return FactorAttribution(returns.dates, fit.factors, contrib, intercept, specific, rp)


@dataclass(frozen=True)
class CurrencyLeg:
    local_return: float
    currency_return: float
    local_risk_free: float
    base_risk_free: float

    def __post_init__(self):
        for k in ("local_return", "currency_return", "local_risk_free", "base_risk_free"):
            if np.any(np.asarray(getattr(self, k)) <= -1):
                raise ValidationError(f"{k} must exceed -1")


@dataclass(frozen=True)
class CurrencyDecomposition:
    base_return: float
    local_excess: float
    currency_excess: float
    cross_product: float


def currency_decomposition(leg: CurrencyLeg) -> CurrencyDecomposition:
    """R = L + E + L E, and R - R_base = local excess + currency excess + cross product.

    Works element-wise when the leg holds arrays.
    """
    l, e = leg.local_return, leg.currency_return
    rfk, rb = leg.local_risk_free, leg.base_risk_free
    return CurrencyDecomposition(
        base_return=l + e + l * e,
        local_excess=l - rfk,
        currency_excess=rfk + e + rfk * e - rb,
        cross_product=(l - rfk) * e)


# ---------------------------------------------------------------------------
# CSV I/O


def _read_csv(path, columns):
    path = Path(path)
    if not path.exists():
        raise ValidationError("file not found", path=str(path))
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in columns if c not in (reader.fieldnames or [])]
        if missing:
            raise ValidationError(f"missing columns {missing}", row=1, path=str(path))
        yield from enumerate(reader, start=2)


def load_segments(path) -> dict[str, SegmentData]:
    """Segments CSV grouped by period (keys keep file order)."""
    groups: dict[str, list] = {}
    for lineno, row in _read_csv(path, SEGMENT_COLUMNS):
        try:
            vals = [float(row[k]) for k in SEGMENT_COLUMNS[2:]]
        except ValueError as exc:
            raise ValidationError(str(exc), row=lineno, path=str(path)) from None
        groups.setdefault(row["period"].strip(), []).append((row["segment"].strip(), *vals))
    out = {}
    for period, rows in groups.items():
        try:
            out[period] = SegmentData(tuple(r[0] for r in rows), *(np.array([r[k] for r in rows])
                                                                    for k in range(1, 5)))
        except ValidationError as exc:
            raise ValidationError(f"period {period}: {exc}", path=str(path)) from None
    return out


def load_currency(path) -> list[tuple[str, str, CurrencyLeg]]:
    out = []
    for lineno, row in _read_csv(path, CURRENCY_COLUMNS):
        try:
            leg = CurrencyLeg(*(float(row[k]) for k in CURRENCY_COLUMNS[2:]))
        except ValueError as exc:
            raise ValidationError(str(exc), row=lineno, path=str(path)) from None
        out.append((row["period"].strip(), row["asset_id"].strip(), leg))
    return out
