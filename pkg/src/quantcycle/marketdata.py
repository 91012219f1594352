"""Price, volume and benchmark data: ingestion, returns, cap weights and
deterministic synthetic markets.

All panels are immutable once built. Dates are opaque ordered labels
(``datetime.date``); nothing here does calendar arithmetic beyond ordering.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateInputError, ValidationError

PRICE_COLUMNS = ("date", "asset_id", "close", "volume", "shares_outstanding")
BENCHMARK_COLUMNS = ("date", "asset_id", "weight")
FACTOR_COLUMNS = ("date", "factor_id", "value")

DEFAULT_ADV_WINDOW = 21


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def fmt_float(x: float) -> str:
    """Serialise a float with 10 significant digits (price-file convention)."""
    return format(float(x), ".10g")


def parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


@dataclass(frozen=True)
class PricePanel:
    dates: tuple[dt.date, ...]
    assets: tuple[str, ...]
    close: np.ndarray
    volume: np.ndarray
    shares_outstanding: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "assets", tuple(str(a) for a in self.assets))
        object.__setattr__(self, "close", _frozen(self.close))
        object.__setattr__(self, "volume", _frozen(self.volume))
        object.__setattr__(self, "shares_outstanding", _frozen(self.shares_outstanding))
        n, m = len(self.dates), len(self.assets)
        if self.close.shape != (n, m) or self.volume.shape != (n, m):
            raise ValidationError(
                f"matrix shape {self.close.shape}/{self.volume.shape} inconsistent "
                f"with {n} dates x {m} assets")
        if self.shares_outstanding.shape != (m,):
            raise ValidationError("shares_outstanding must have one entry per asset")
        if len(set(self.assets)) != m:
            raise ValidationError("duplicate asset identifiers")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise ValidationError("dates must be strictly increasing")
        if not np.all(np.isfinite(self.close)) or np.any(self.close <= 0):
            raise ValidationError("prices must be finite and strictly positive")
        if np.any(self.volume < 0) or not np.all(np.isfinite(self.volume)):
            raise ValidationError("volumes must be finite and non-negative")
        if np.any(self.shares_outstanding < 0):
            raise ValidationError("shares outstanding must be non-negative")

    def date_index(self, date: dt.date) -> int:
        try:
            return self.dates.index(date)
        except ValueError:
            raise ValidationError(f"date {date} not in panel") from None

    def asset_index(self, asset: str) -> int:
        try:
            return self.assets.index(asset)
        except ValueError:
            raise ValidationError(f"unknown asset {asset!r}") from None

    def column_means(self) -> np.ndarray:
        return self.close.mean(axis=0)

    def slice(self, start: int, stop: int) -> "PricePanel":
        return PricePanel(self.dates[start:stop], self.assets, self.close[start:stop],
                          self.volume[start:stop], self.shares_outstanding)

    def average_daily_volume(self, end: int | None = None,
                             window: int = DEFAULT_ADV_WINDOW) -> np.ndarray:
        """Trailing mean volume over ``window`` rows ending at row ``end`` (inclusive)."""
        end = len(self.dates) - 1 if end is None else end
        lo = max(0, end - window + 1)
        return self.volume[lo:end + 1].mean(axis=0)


@dataclass(frozen=True)
class ReturnPanel:
    """Simple period returns; row ``t`` is labelled with the period's end date."""

    dates: tuple[dt.date, ...]
    assets: tuple[str, ...]
    returns: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "assets", tuple(self.assets))
        object.__setattr__(self, "returns", _frozen(self.returns))
        if self.returns.shape != (len(self.dates), len(self.assets)):
            raise ValidationError("return matrix shape inconsistent with dates x assets")
        if np.any(self.returns <= -1):
            raise ValidationError("returns must exceed -1")

    def __len__(self) -> int:
        return len(self.dates)

    def slice(self, start: int, stop: int) -> "ReturnPanel":
        return ReturnPanel(self.dates[start:stop], self.assets, self.returns[start:stop])

    def column(self, asset: str) -> np.ndarray:
        return self.returns[:, self.assets.index(asset)]


@dataclass(frozen=True)
class BenchmarkSpec:
    """Benchmark weights by date. Weights dated ``d`` apply to the period starting at ``d``."""

    dates: tuple[dt.date, ...]
    assets: tuple[str, ...]
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "assets", tuple(self.assets))
        object.__setattr__(self, "weights", _frozen(self.weights))
        if self.weights.shape != (len(self.dates), len(self.assets)):
            raise ValidationError("benchmark weight matrix shape inconsistent")
        if np.any(self.weights < 0):
            raise ValidationError("benchmark weights must be non-negative")
        bad = np.flatnonzero(np.abs(self.weights.sum(axis=1) - 1.0) > 1e-9)
        if bad.size:
            raise ValidationError(f"benchmark weights on {self.dates[bad[0]]} do not sum to 1")

    def weights_at(self, date: dt.date) -> np.ndarray:
        """Most recent weights dated on or before ``date``."""
        idx = np.searchsorted(np.array([d.toordinal() for d in self.dates]),
                              date.toordinal(), side="right") - 1
        if idx < 0:
            raise ValidationError(f"no benchmark weights on or before {date}")
        return self.weights[idx]

    def returns(self, panel: ReturnPanel, period_starts: Sequence[dt.date]) -> np.ndarray:
        """Benchmark return per row of ``panel``; ``period_starts[t]`` dates row ``t``'s start."""
        if tuple(panel.assets) != self.assets:
            raise ValidationError("benchmark and return panel universes differ")
        w = np.vstack([self.weights_at(d) for d in period_starts])
        return np.einsum("ij,ij->i", w, panel.returns)


@dataclass(frozen=True)
class FactorPanel:
    dates: tuple[dt.date, ...]
    factors: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "factors", tuple(self.factors))
        object.__setattr__(self, "values", _frozen(self.values))
        if self.values.shape != (len(self.dates), len(self.factors)):
            raise ValidationError("factor matrix shape inconsistent with dates x factors")

    def select(self, dates: Sequence[dt.date]) -> "FactorPanel":
        pos = {d: i for i, d in enumerate(self.dates)}
        missing = [d for d in dates if d not in pos]
        if missing:
            raise ValidationError(f"factor panel missing date {missing[0]}")
        idx = [pos[d] for d in dates]
        return FactorPanel(tuple(dates), self.factors, self.values[idx])


# ---------------------------------------------------------------------------
# CSV I/O


def _read_rows(path, columns):
    path = Path(path)
    if not path.exists():
        raise ValidationError("file not found", path=str(path))
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError("empty file", path=str(path)) from None
        header = [h.strip() for h in header]
        missing = [c for c in columns if c not in header]
        if missing:
            raise ValidationError(f"missing columns {missing}", row=1, path=str(path))
        idx = [header.index(c) for c in columns]
        for lineno, raw in enumerate(reader, start=2):
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) < len(header):
                raise ValidationError("too few fields", row=lineno, path=str(path))
            yield lineno, [raw[i].strip() for i in idx]


def _float(text, what, lineno, path):
    try:
        x = float(text)
    except ValueError:
        raise ValidationError(f"unparseable {what} {text!r}", row=lineno, path=str(path)) from None
    if not np.isfinite(x):
        raise ValidationError(f"non-finite {what}", row=lineno, path=str(path))
    return x


def _date(text, lineno, path):
    try:
        return parse_date(text)
    except ValueError:
        raise ValidationError(f"unparseable date {text!r}", row=lineno, path=str(path)) from None


def load_prices(path) -> PricePanel:
    """Read a prices CSV (``date,asset_id,close,volume,shares_outstanding``).

    Every (date, asset) cell must be present exactly once; holes, duplicates,
    non-positive prices and unparseable fields raise ``ValidationError`` naming
    the offending row.
    """
    records = {}
    shares = {}
    for lineno, (d, a, c, v, s) in _read_rows(path, PRICE_COLUMNS):
        date = _date(d, lineno, path)
        if not a:
            raise ValidationError("empty asset_id", row=lineno, path=str(path))
        close = _float(c, "close", lineno, path)
        if close <= 0:
            raise ValidationError(f"non-positive price {close}", row=lineno, path=str(path))
        volume = _float(v, "volume", lineno, path)
        if volume < 0:
            raise ValidationError(f"negative volume {volume}", row=lineno, path=str(path))
        so = _float(s, "shares_outstanding", lineno, path)
        if so < 0:
            raise ValidationError(f"negative shares_outstanding {so}", row=lineno, path=str(path))
        if (date, a) in records:
            raise ValidationError(f"duplicate (date, asset) ({d}, {a})", row=lineno, path=str(path))
        if a in shares and shares[a] != so:
            raise ValidationError(f"shares_outstanding for {a} changes over time",
                                  row=lineno, path=str(path))
        shares[a] = so
        records[(date, a)] = (close, volume, lineno)
    if not records:
        raise ValidationError("no data rows", path=str(path))
    dates = sorted({k[0] for k in records})
    assets = sorted(shares)
    close = np.empty((len(dates), len(assets)))
    volume = np.empty_like(close)
    for i, d in enumerate(dates):
        for j, a in enumerate(assets):
            try:
                close[i, j], volume[i, j], _ = records[(d, a)]
            except KeyError:
                raise ValidationError(f"missing observation for ({d}, {a})", path=str(path)) from None
    return PricePanel(tuple(dates), tuple(assets), close, volume,
                      np.array([shares[a] for a in assets]))


def write_prices(panel: PricePanel, path) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write(",".join(PRICE_COLUMNS) + "\n")
        for i, d in enumerate(panel.dates):
            for j, a in enumerate(panel.assets):
                fh.write(",".join([d.isoformat(), a, fmt_float(panel.close[i, j]),
                                   fmt_float(panel.volume[i, j]),
                                   fmt_float(panel.shares_outstanding[j])]) + "\n")


def load_benchmark(path, assets: Sequence[str]) -> BenchmarkSpec:
    """Read ``date,asset_id,weight``; assets absent on a date get weight 0."""
    assets = tuple(assets)
    table: dict[dt.date, dict[str, float]] = {}
    for lineno, (d, a, w) in _read_rows(path, BENCHMARK_COLUMNS):
        date = _date(d, lineno, path)
        if a not in assets:
            raise ValidationError(f"unknown asset {a!r}", row=lineno, path=str(path))
        weight = _float(w, "weight", lineno, path)
        if weight < 0:
            raise ValidationError("negative benchmark weight", row=lineno, path=str(path))
        row = table.setdefault(date, {})
        if a in row:
            raise ValidationError(f"duplicate (date, asset) ({d}, {a})", row=lineno, path=str(path))
        row[a] = weight
    dates = sorted(table)
    weights = np.array([[table[d].get(a, 0.0) for a in assets] for d in dates])
    return BenchmarkSpec(tuple(dates), assets, weights)


def write_benchmark(bench: BenchmarkSpec, path) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write(",".join(BENCHMARK_COLUMNS) + "\n")
        for i, d in enumerate(bench.dates):
            for j, a in enumerate(bench.assets):
                fh.write(f"{d.isoformat()},{a},{float(bench.weights[i, j])!r}\n")


def load_factors(path) -> FactorPanel:
    table: dict[dt.date, dict[str, float]] = {}
    factors: list[str] = []
    for lineno, (d, f, v) in _read_rows(path, FACTOR_COLUMNS):
        date = _date(d, lineno, path)
        value = _float(v, "value", lineno, path)
        row = table.setdefault(date, {})
        if f in row:
            raise ValidationError(f"duplicate (date, factor) ({d}, {f})", row=lineno, path=str(path))
        row[f] = value
        if f not in factors:
            factors.append(f)
    factors.sort()
    dates = sorted(table)
    values = np.empty((len(dates), len(factors)))
    for i, d in enumerate(dates):
        for k, f in enumerate(factors):
            if f not in table[d]:
                raise ValidationError(f"missing factor value ({d}, {f})", path=str(path))
            values[i, k] = table[d][f]
    return FactorPanel(tuple(dates), tuple(factors), values)


def write_factors(panel: FactorPanel, path) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write(",".join(FACTOR_COLUMNS) + "\n")
        for i, d in enumerate(panel.dates):
            for k, f in enumerate(panel.factors):
                fh.write(f"{d.isoformat()},{f},{float(panel.values[i, k])!r}\n")


# ---------------------------------------------------------------------------
# Derived quantities


def compute_returns(panel: PricePanel) -> ReturnPanel:
    if len(panel.dates) < 2:
        raise DegenerateInputError("need at least 2 dates to compute returns")
    r = panel.close[1:] / panel.close[:-1] - 1.0
    return ReturnPanel(panel.dates[1:], panel.assets, r)


def cap_weights(panel: PricePanel, date: dt.date) -> np.ndarray:
    """Market-capitalisation weights p_i s_i / sum_j p_j s_j on ``date``."""
    caps = panel.close[panel.date_index(date)] * panel.shares_outstanding
    total = caps.sum()
    if total <= 0:
        raise DegenerateInputError(f"zero total capitalisation on {date}")
    return caps / total


def cap_weighted_benchmark(panel: PricePanel) -> BenchmarkSpec:
    caps = panel.close * panel.shares_outstanding
    totals = caps.sum(axis=1, keepdims=True)
    if np.any(totals <= 0):
        raise DegenerateInputError("zero total capitalisation")
    return BenchmarkSpec(panel.dates, panel.assets, caps / totals)


# ---------------------------------------------------------------------------
# Synthetic markets


@dataclass(frozen=True)
class MarketSpec:
    """Generator parameters for :func:`synthetic_market`.

    Log-price increments per period are ``drift + loadings @ f_t + vol * z_t``
    with ``f_t ~ N(0, diag(factor_volatility**2))``.
    """

    n_assets: int = 5
    n_dates: int = 253
    drift: float | Sequence[float] = 0.0003
    volatility: float | Sequence[float] = 0.01
    n_factors: int = 0
    factor_volatility: float | Sequence[float] = 0.01
    loadings: Sequence[Sequence[float]] | None = None
    initial_price: float | Sequence[float] = 100.0
    base_volume: float | Sequence[float] = 1.0e6
    volume_dispersion: float = 0.25
    shares_outstanding: float | Sequence[float] | None = None
    start: dt.date = field(default=dt.date(2020, 1, 1))
    asset_prefix: str = "A"

    def validate(self) -> None:
        if self.n_assets < 1:
            raise ValidationError("n_assets must be >= 1")
        if self.n_dates < 2:
            raise ValidationError("horizon must be at least 2 dates")
        for name in ("volatility", "factor_volatility", "volume_dispersion"):
            if np.any(np.asarray(getattr(self, name), dtype=float) < 0):
                raise ValidationError(f"{name} must be non-negative")
        if np.any(np.asarray(self.initial_price, dtype=float) <= 0):
            raise ValidationError("initial_price must be positive")
        if self.loadings is not None and np.shape(self.loadings) != (self.n_assets, self.n_factors):
            raise ValidationError("loadings must be n_assets x n_factors")


def _per_asset(x, n):
    arr = np.broadcast_to(np.asarray(x, dtype=float), (n,))
    return arr.copy()


def synthetic_market_with_factors(seed: int, spec: MarketSpec | None = None
                                  ) -> tuple[PricePanel, FactorPanel]:
    """Deterministic synthetic market plus the factor draws that drove it.

    The factor panel holds the log-increment factor shocks, dated like the
    return rows (period end).
    """
    spec = spec or MarketSpec()
    spec.validate()
    n, t = spec.n_assets, spec.n_dates
    price_rng, factor_rng, volume_rng, loading_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4))
    drift = _per_asset(spec.drift, n)
    vol = _per_asset(spec.volatility, n)
    k = spec.n_factors
    fvol = np.broadcast_to(np.asarray(spec.factor_volatility, dtype=float), (k,))
    if spec.loadings is not None:
        loadings = np.asarray(spec.loadings, dtype=float)
    else:
        loadings = loading_rng.normal(1.0, 0.3, size=(n, k)) if k else np.zeros((n, 0))
    f = factor_rng.standard_normal((t - 1, k)) * fvol
    z = price_rng.standard_normal((t - 1, n))
    increments = drift + f @ loadings.T + z * vol
    log_p = np.log(_per_asset(spec.initial_price, n)) + np.vstack(
        [np.zeros((1, n)), np.cumsum(increments, axis=0)])
    close = np.exp(log_p)
    base = _per_asset(spec.base_volume, n)
    volume = base * np.exp(spec.volume_dispersion * volume_rng.standard_normal((t, n))
                           - 0.5 * spec.volume_dispersion ** 2)
    if spec.shares_outstanding is None:
        shares = 50.0 * base
    else:
        shares = _per_asset(spec.shares_outstanding, n)
    dates = tuple(spec.start + dt.timedelta(days=i) for i in range(t))
    width = max(2, len(str(n)))
    assets = tuple(f"{spec.asset_prefix}{i:0{width}d}" for i in range(n))
    panel = PricePanel(dates, assets, close, volume, shares)
    factors = FactorPanel(dates[1:], tuple(f"F{j}" for j in range(k)), f)
    return panel, factors


def synthetic_market(seed: int, spec: MarketSpec | None = None) -> PricePanel:
    return synthetic_market_with_factors(seed, spec)[0]
