"""Transaction cost analysis: power-law market impact (prediction and
calibration), pre-trade metrics, post-trade benchmark slippage and FX slippage.

Impact model, with participation ``x = |X| / (V T)``::

    I         = sigma * gamma * T * sgn(X) * x**alpha * (theta / V)**delta
    J - I / 2 = sigma * eta * sgn(X) * x**beta

``theta`` is read as shares outstanding. The stated trade rate ``v = X / T``
enters only through ``x``.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize

from .errors import ConvergenceError, DegenerateInputError, ValidationError
from .factor_model import IndexFit, single_index_covariance
from .marketdata import DEFAULT_ADV_WINDOW, PricePanel, compute_returns

ORDER_COLUMNS = ("order_id", "asset_id", "shares", "duration_days", "arrival_price",
                 "avg_exec_price", "post_price")
BENCHMARK_PRICE_COLUMNS = ("order_id", "vwap", "open", "close", "prev_close", "interval_vwap")
FX_COLUMNS = ("ts", "pair", "exec_price", "market_price", "day_high", "day_low")
BENCHMARKS = ("vwap", "open", "close", "prev_close", "arrival", "interval_vwap")

START_EXPONENTS = (0.25, 0.5, 1.0, 1.5, 2.0)
START_DELTAS = (0.0, 0.25, 0.5, 1.0)


@dataclass(frozen=True)
class Order:
    asset: str
    shares: float
    duration: float
    arrival_price: float
    post_price: float | None = None
    avg_exec_price: float | None = None
    order_id: str = ""

    def __post_init__(self):
        if not self.arrival_price > 0:
            raise ValidationError(f"order {self.order_id!r}: arrival price must be positive")
        if not self.duration > 0:
            raise ValidationError(f"order {self.order_id!r}: duration must be positive")
        for name in ("post_price", "avg_exec_price"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValidationError(f"order {self.order_id!r}: {name} must be positive")

    @property
    def side(self) -> float:
        return float(np.sign(self.shares))

    @property
    def completed(self) -> bool:
        return self.post_price is not None and self.avg_exec_price is not None


@dataclass(frozen=True)
class MarketStats:
    adv: float
    volatility: float
    shares_outstanding: float
    spread: float = 0.0

    def __post_init__(self):
        if not self.adv > 0:
            raise ValidationError("average daily volume must be positive")
        if self.volatility < 0:
            raise ValidationError("volatility must be non-negative")
        if not self.shares_outstanding > 0:
            raise ValidationError("shares outstanding must be positive")
        if self.spread < 0:
            raise ValidationError("spread must be non-negative")


@dataclass(frozen=True)
class ImpactParams:
    alpha: float
    beta: float
    gamma: float
    eta: float
    delta: float

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.gamma, self.eta, self.delta)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError("impact parameters must be finite")
        if not (self.alpha > 0 and self.beta > 0):
            raise ValidationError("impact exponents alpha and beta must be positive")

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Measured and predicted impact


def permanent_impact(order: Order) -> float:
    """I = (S_post - S_0) / S_0."""
    if order.post_price is None:
        raise ValidationError(f"order {order.order_id!r} has no post-trade price")
    return (order.post_price - order.arrival_price) / order.arrival_price


def realized_impact(order: Order) -> float:
    """J = (S_avg - S_0) / S_0."""
    if order.avg_exec_price is None:
        raise ValidationError(f"order {order.order_id!r} has no average execution price")
    return (order.avg_exec_price - order.arrival_price) / order.arrival_price


def temporary_impact(order: Order) -> float:
    return realized_impact(order) - 0.5 * permanent_impact(order)


def participation(shares, adv, duration):
    return np.abs(np.asarray(shares, dtype=float)) / (np.asarray(adv, float) * np.asarray(duration, float))


def _impact(shares, duration, sigma, adv, theta, p: ImpactParams):
    x = participation(shares, adv, duration)
    s = np.sign(shares)
    with np.errstate(divide="ignore"):
        perm = sigma * p.gamma * duration * s * np.where(x > 0, x, 1.0) ** p.alpha * (theta / adv) ** p.delta
        temp = sigma * p.eta * s * np.where(x > 0, x, 1.0) ** p.beta
    return np.where(x > 0, perm, 0.0), np.where(x > 0, temp, 0.0)


def predict_impact(order: Order, stats: MarketStats, params: ImpactParams) -> tuple[float, float]:
    """Predicted (I, J) for an order; ``X = 0`` gives (0, 0)."""
    if order.shares == 0:
        return 0.0, 0.0
    perm, temp = _impact(order.shares, order.duration, stats.volatility, stats.adv,
                         stats.shares_outstanding, params)
    perm, temp = float(perm), float(temp)
    return perm, 0.5 * perm + temp


# ---------------------------------------------------------------------------
# Calibration


@dataclass(frozen=True)
class CalibrationResult:
    params: ImpactParams
    rms_permanent: float
    rms_temporary: float
    n_orders: int
    converged: bool
    starts: int


def _design(orders: Sequence[Order], stats: Mapping[str, MarketStats]):
    missing = sorted({o.asset for o in orders} - set(stats))
    if missing:
        raise ValidationError(f"no market statistics for assets {missing}")
    incomplete = [o.order_id for o in orders if not o.completed]
    if incomplete:
        raise ValidationError(f"orders without execution data: {incomplete[:5]}")
    zero = [o.order_id for o in orders if o.shares == 0]
    if zero:
        raise ValidationError(f"zero-share orders cannot be used for calibration: {zero[:5]}")
    x = np.array([participation(o.shares, stats[o.asset].adv, o.duration) for o in orders])
    s = np.array([o.side for o in orders])
    t = np.array([o.duration for o in orders])
    sig = np.array([stats[o.asset].volatility for o in orders])
    z = np.array([stats[o.asset].shares_outstanding / stats[o.asset].adv for o in orders])
    i_obs = np.array([permanent_impact(o) for o in orders])
    tmp_obs = np.array([temporary_impact(o) for o in orders])
    return x, s, t, sig, z, i_obs, tmp_obs


def _fit_scaled_power(features: np.ndarray, base: np.ndarray, y: np.ndarray,
                      starts: Sequence[Sequence[float]]):
    """Fit ``y = c * base * prod(features_k ** e_k)`` over exponents ``e``.

    The scale ``c`` is profiled out (closed form for fixed exponents); the
    exponents are found by Levenberg-Marquardt from every start, keeping the
    best residual. Returns ``(c, exponents, rms, converged)``.
    """
    logf = np.log(features)
    norm = max(float(np.sqrt(np.mean(y ** 2))), np.finfo(float).tiny)

    def shape(e):
        return base * np.exp(logf @ e)

    def scale(g):
        gg = g @ g
        return (g @ y) / gg if gg > 0 else 0.0

    def resid(e):
        g = shape(e)
        return (scale(g) * g - y) / norm

    best = None
    for e0 in starts:
        try:
            sol = optimize.least_squares(resid, np.asarray(e0, float), method="lm",
                                         xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000)
        except (ValueError, FloatingPointError):
            continue
        if not np.all(np.isfinite(sol.x)):
            continue
        cost = float(np.sum(sol.fun ** 2))
        if best is None or cost < best[0] - 1e-300:
            best = (cost, sol)
    if best is None:
        raise ConvergenceError("impact calibration failed from every start")
    cost, sol = best
    e = sol.x
    c = scale(shape(e))
    rms = float(np.sqrt(np.mean((c * shape(e) - y) ** 2)))
    return c, e, rms, bool(sol.status > 0)


def calibrate_impact(orders: Sequence[Order], stats: Mapping[str, MarketStats],
                     min_orders: int = 50) -> CalibrationResult:
    """Fit (alpha, beta, gamma, eta, delta) by nonlinear least squares.

    The permanent equation is fit to the observed ``I``; the temporary one to
    ``J - I/2``. Deterministic multi-start over exponents in [0.25, 2].
    """
    if len(orders) < min_orders:
        raise ValidationError(f"calibration needs at least {min_orders} completed orders")
    x, s, t, sig, z, i_obs, tmp_obs = _design(orders, stats)
    if len(np.unique(np.round(x, 12))) < 3:
        raise DegenerateInputError("calibration needs at least 3 distinct participation rates")
    perm_features = [x]
    perm_starts = [(a,) for a in START_EXPONENTS]
    if len(np.unique(np.round(z, 12))) >= 2:
        perm_features.append(z)
        perm_starts = list(itertools.product(START_EXPONENTS, START_DELTAS))
        fixed_delta = None
    else:
        # a single theta/V value is absorbed into gamma
        fixed_delta = 0.0
    gamma, e_perm, rms_i, ok_i = _fit_scaled_power(
        np.column_stack(perm_features), sig * t * s, i_obs, perm_starts)
    eta, e_temp, rms_j, ok_j = _fit_scaled_power(
        x[:, None], sig * s, tmp_obs, [(b,) for b in START_EXPONENTS])
    delta = float(e_perm[1]) if fixed_delta is None else fixed_delta
    try:
        params = ImpactParams(float(e_perm[0]), float(e_temp[0]), float(gamma), float(eta), delta)
    except ValidationError as exc:
        raise ConvergenceError(f"calibration produced invalid parameters: {exc}") from None
    result = CalibrationResult(params, rms_i, rms_j, len(orders), ok_i and ok_j,
                               len(perm_starts) + len(START_EXPONENTS))
    if not result.converged:
        raise ConvergenceError("impact calibration did not converge", best=result)
    return result


def simulate_orders(rng: np.random.Generator, n: int, params: ImpactParams,
                    stats: Mapping[str, MarketStats], *, participation_range=(0.01, 0.5),
                    duration_range=(0.1, 1.0), arrival_price: float = 100.0,
                    relative_noise: float = 0.0, diffusion: bool = False) -> list[Order]:
    """Synthetic completed orders generated from the impact model.

    Prices follow ``dS = S0 g(v) dt + S0 sigma dB`` over the order's life, so
    ``S_post - S0 = S0 (I + sigma B_T)`` and ``S_avg`` adds the temporary
    concession to the path average. ``relative_noise`` multiplies ``I`` and
    ``J - I/2`` by ``1 + relative_noise * z`` instead; ``diffusion=False``
    drops the Brownian term.
    """
    assets = sorted(stats)
    out = []
    lo, hi = np.log(participation_range[0]), np.log(participation_range[1])
    for k in range(n):
        a = assets[int(rng.integers(len(assets)))]
        st = stats[a]
        dur = float(rng.uniform(*duration_range))
        part = float(np.exp(rng.uniform(lo, hi)))
        side = 1.0 if rng.random() < 0.5 else -1.0
        shares = side * part * st.adv * dur
        order = Order(a, shares, dur, arrival_price, order_id=f"S{k:06d}")
        perm, real = predict_impact(order, st, params)
        temp = real - 0.5 * perm
        if relative_noise:
            perm *= 1.0 + relative_noise * rng.standard_normal()
            temp *= 1.0 + relative_noise * rng.standard_normal()
        if diffusion:
            # (B_T, time-average of B) are jointly normal: var T, T/3, cov T/2
            cov = np.array([[dur, dur / 2], [dur / 2, dur / 3]])
            b_end, b_avg = rng.multivariate_normal(np.zeros(2), cov)
            post = arrival_price * (1 + perm + st.volatility * b_end)
            avg = arrival_price * (1 + 0.5 * perm + temp + st.volatility * b_avg)
        else:
            post = arrival_price * (1 + perm)
            avg = arrival_price * (1 + 0.5 * perm + temp)
        out.append(Order(a, shares, dur, arrival_price, post, avg, order.order_id))
    return out


# ---------------------------------------------------------------------------
# Pre-trade


def market_stats(panel: PricePanel, *, window: int = DEFAULT_ADV_WINDOW, end: int | None = None,
                 spreads: Mapping[str, float] | None = None) -> dict[str, MarketStats]:
    """Per-asset ADV (trailing ``window`` rows), daily return volatility and shares outstanding."""
    end = len(panel.dates) - 1 if end is None else end
    adv = panel.average_daily_volume(end, window)
    lo = max(0, end - window)
    rets = compute_returns(panel.slice(lo, end + 1)).returns
    vol = rets.std(axis=0, ddof=1) if len(rets) >= 2 else np.zeros(len(panel.assets))
    spreads = spreads or {}
    return {a: MarketStats(float(adv[j]), float(vol[j]), float(panel.shares_outstanding[j]),
                           float(spreads.get(a, 0.0)))
            for j, a in enumerate(panel.assets)}


@dataclass(frozen=True)
class OrderMetrics:
    order_id: str
    asset: str
    shares: float
    notional: float
    participation: float
    permanent_impact: float
    realized_impact: float
    expected_cost: float
    market_risk: float
    spread: float
    beta: float


@dataclass(frozen=True)
class PreTradeReport:
    orders: list[OrderMetrics]
    weights: np.ndarray
    participation: float
    expected_cost: float
    market_risk: float
    tracking_error: float
    spread: float
    beta: float
    duration: float
    missing: list[str] = field(default_factory=list)


def pre_trade_report(orders: Sequence[Order], prices: PricePanel, fits: IndexFit,
                     benchmark_returns, params: ImpactParams,
                     stats: Mapping[str, MarketStats] | None = None,
                     adjusted_betas: Mapping[str, float] | None = None) -> PreTradeReport:
    """Per-order and basket pre-trade metrics.

    Basket weights are signed notional fractions ``X_i S0_i / sum |X_j S0_j|``.
    Cost, participation and spread aggregate with ``|w|``; beta and risk with
    signed ``w``. Market risk is ``sigma_p sqrt(T)`` with ``sigma_p`` from the
    single-index covariance and ``T`` the notional-weighted duration.
    """
    stats = dict(stats) if stats is not None else market_stats(prices)
    betas = dict(zip(fits.assets, fits.beta))
    if adjusted_betas is not None:
        betas.update(adjusted_betas)
    missing = sorted({o.asset for o in orders if o.asset not in stats or o.asset not in betas
                      or o.asset not in prices.assets})
    if missing:
        raise ValidationError(f"missing per-asset inputs for {missing}")
    if not orders:
        raise ValidationError("no orders")
    notional = np.array([o.shares * o.arrival_price for o in orders])
    gross = np.abs(notional).sum()
    w = notional / gross if gross > 0 else np.zeros(len(orders))
    cov = single_index_covariance(fits)
    idx = [fits.index(o.asset) for o in orders]
    order_cov = cov[np.ix_(idx, idx)]
    rows = []
    for o in orders:
        st = stats[o.asset]
        perm, real = predict_impact(o, st, params)
        rows.append(OrderMetrics(
            o.order_id, o.asset, o.shares, o.shares * o.arrival_price,
            float(participation(o.shares, st.adv, o.duration)), perm, real, o.side * real,
            st.volatility * math.sqrt(o.duration), st.spread, float(betas[o.asset])))
    aw = np.abs(w)
    duration = float(aw @ [o.duration for o in orders]) if gross > 0 else 0.0
    sigma_p = math.sqrt(max(float(w @ order_cov @ w), 0.0))
    rets = compute_returns(prices).returns[:, [prices.assets.index(o.asset) for o in orders]]
    bench = np.asarray(benchmark_returns, dtype=float)
    if len(bench) != len(rets):
        raise ValidationError("benchmark returns must align with the price panel's returns")
    active = rets @ w - bench
    te = float(active.std(ddof=1)) if len(active) >= 2 else 0.0
    return PreTradeReport(
        rows, w,
        participation=float(aw @ [r.participation for r in rows]),
        expected_cost=float(aw @ [r.expected_cost for r in rows]),
        market_risk=sigma_p * math.sqrt(duration),
        tracking_error=te,
        spread=float(aw @ [r.spread for r in rows]),
        beta=float(w @ [r.beta for r in rows]),
        duration=duration)


# ---------------------------------------------------------------------------
# Post-trade


def slippage(side: float, exec_price: float, reference: float) -> float:
    """sgn(X) (S_avg - P) / P; positive is a cost."""
    if not reference > 0:
        raise ValidationError("reference price must be positive")
    return float(np.sign(side)) * (exec_price - reference) / reference


def post_trade_report(executions: Sequence[Order], reference_prices: Mapping[str, Mapping[str, float]],
                      benchmarks: Sequence[str] = BENCHMARKS) -> dict[str, dict[str, float]]:
    """Slippage of each completed order against each requested benchmark.

    ``reference_prices[order_id][benchmark]``; the arrival benchmark defaults
    to the order's own arrival price.
    """
    out = {}
    for o in executions:
        if o.avg_exec_price is None:
            raise ValidationError(f"order {o.order_id!r} has no average execution price")
        refs = dict(reference_prices.get(o.order_id, {}))
        refs.setdefault("arrival", o.arrival_price)
        row = {}
        for b in benchmarks:
            if b not in BENCHMARKS:
                raise ValidationError(f"unknown benchmark {b!r}")
            p = refs.get(b)
            if p is None or (isinstance(p, float) and math.isnan(p)):
                raise ValidationError(f"order {o.order_id!r}: missing {b} benchmark price")
            row[b] = slippage(o.shares, o.avg_exec_price, float(p))
        out[o.order_id] = row
    return out


def fx_slippage(exec_price: float, market_price_at_exec: float, day_high: float, day_low: float,
                side: float = 1.0) -> tuple[float, float]:
    """(vs market price at execution, vs mid of the day's high and low)."""
    if min(exec_price, market_price_at_exec, day_high, day_low) <= 0:
        raise ValidationError("FX prices must be positive")
    if day_high < day_low:
        raise ValidationError("day high is below day low")
    mid = 0.5 * (day_high + day_low)
    return slippage(side, exec_price, market_price_at_exec), slippage(side, exec_price, mid)


# ---------------------------------------------------------------------------
# CSV I/O


def _opt_float(text: str):
    text = text.strip()
    return None if text == "" else float(text)


def load_orders(path) -> list[Order]:
    path = Path(path)
    if not path.exists():
        raise ValidationError("file not found", path=str(path))
    out = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ORDER_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValidationError(f"missing columns {missing}", row=1, path=str(path))
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(Order(row["asset_id"].strip(), float(row["shares"]),
                                 float(row["duration_days"]), float(row["arrival_price"]),
                                 _opt_float(row["post_price"]), _opt_float(row["avg_exec_price"]),
                                 row["order_id"].strip()))
            except ValueError as exc:
                raise ValidationError(str(exc), row=lineno, path=str(path)) from None
    return out


def write_orders(orders: Sequence[Order], path) -> None:
    def f(v):
        return "" if v is None else repr(float(v))

    with Path(path).open("w", newline="") as fh:
        fh.write(",".join(ORDER_COLUMNS) + "\n")
        for o in orders:
            fh.write(",".join([o.order_id, o.asset, f(o.shares), f(o.duration), f(o.arrival_price),
                               f(o.avg_exec_price), f(o.post_price)]) + "\n")


def load_benchmark_prices(path) -> dict[str, dict[str, float]]:
    path = Path(path)
    if not path.exists():
        raise ValidationError("file not found", path=str(path))
    out = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in BENCHMARK_PRICE_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValidationError(f"missing columns {missing}", row=1, path=str(path))
        for lineno, row in enumerate(reader, start=2):
            try:
                out[row["order_id"].strip()] = {
                    k: v for k in BENCHMARK_PRICE_COLUMNS[1:]
                    if (v := _opt_float(row[k])) is not None}
            except ValueError as exc:
                raise ValidationError(str(exc), row=lineno, path=str(path)) from None
    return out


def load_fx(path) -> list[dict]:
    """Rows of the FX CSV; an optional ``side`` column (buy/sell) defaults to buy."""
    path = Path(path)
    if not path.exists():
        raise ValidationError("file not found", path=str(path))
    out = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in FX_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValidationError(f"missing columns {missing}", row=1, path=str(path))
        for lineno, row in enumerate(reader, start=2):
            side_text = (row.get("side") or "buy").strip().lower()
            if side_text not in ("buy", "sell"):
                raise ValidationError(f"side must be buy or sell, got {side_text!r}", row=lineno,
                                      path=str(path))
            try:
                rec = {"ts": row["ts"].strip(), "pair": row["pair"].strip(),
                       "side": 1.0 if side_text == "buy" else -1.0}
                for k in FX_COLUMNS[2:]:
                    rec[k] = float(row[k])
            except ValueError as exc:
                raise ValidationError(str(exc), row=lineno, path=str(path)) from None
            out.append(rec)
    return out
