"""Security selection: composite scores, rankings, Information Coefficient
statistics and their conversion into view confidences."""

from __future__ import annotations

import datetime as dt
import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .econometrics import spearman
from .errors import DegenerateInputError, ValidationError
from .marketdata import ReturnPanel

DEFAULT_IR_CAP = 1.0
CONFIDENCE_MODES = ("ir", "hit")


@dataclass(frozen=True)
class Ranking:
    """Universe ordered best-first; ``scores[i]`` belongs to ``assets[i]``."""

    date: dt.date
    assets: tuple[str, ...]
    scores: np.ndarray

    def score_of(self) -> dict[str, float]:
        return {a: float(s) for a, s in zip(self.assets, self.scores)}

    def aligned_scores(self, universe: Sequence[str]) -> np.ndarray:
        lookup = self.score_of()
        try:
            return np.array([lookup[a] for a in universe])
        except KeyError as exc:
            raise ValidationError(f"asset {exc.args[0]!r} missing from ranking") from None

    def positions(self) -> dict[str, int]:
        return {a: i + 1 for i, a in enumerate(self.assets)}


@dataclass(frozen=True)
class ICSeries:
    dates: tuple[dt.date, ...]
    ic_values: np.ndarray
    holding_period: int

    def __post_init__(self):
        v = np.asarray(self.ic_values, dtype=float)
        object.__setattr__(self, "ic_values", v)
        if self.holding_period < 1:
            raise ValidationError("holding period must be positive")
        if len(v) != len(self.dates):
            raise ValidationError("one IC value per date")
        if np.any(np.abs(v) > 1 + 1e-12):
            raise ValidationError("IC values must lie in [-1, 1]")


@dataclass(frozen=True)
class ViewSignal:
    group_long: frozenset[str]
    group_short: frozenset[str] | None
    expected_outperformance: float
    information_ratio: float
    hit_ratio: float
    confidence: float
    label: str = field(default="")

    def __post_init__(self):
        object.__setattr__(self, "group_long", frozenset(self.group_long))
        if self.group_short is not None:
            object.__setattr__(self, "group_short", frozenset(self.group_short))
            if self.group_long & self.group_short:
                raise ValidationError("long and short groups overlap")
        if not self.group_long:
            raise ValidationError("long group is empty")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError("confidence must lie in [0, 1]")
        if not 0.0 <= self.hit_ratio <= 1.0:
            raise ValidationError("hit ratio must lie in [0, 1]")
        if self.information_ratio <= 0 and self.confidence != 0:
            raise ValidationError("confidence must be 0 for a non-positive information ratio")

    @property
    def is_relative(self) -> bool:
        return bool(self.group_short)


# ---------------------------------------------------------------------------


def standardize(exposures) -> np.ndarray:
    """Cross-sectional z-score per column (mean 0, sample std 1)."""
    x = np.asarray(exposures, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    sd = x.std(axis=0, ddof=1)
    if np.any(sd == 0) or not np.all(np.isfinite(sd)):
        raise DegenerateInputError("a factor has zero cross-sectional dispersion")
    return (x - x.mean(axis=0)) / sd


def composite_score(exposures, factor_weights) -> np.ndarray:
    """Weighted sum of standardised exposures.

    ``exposures`` is an [asset x factor] array or anything with a ``loadings``
    attribute (e.g. a ``FactorModelFit``).
    """
    x = np.asarray(getattr(exposures, "loadings", exposures), dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    w = np.atleast_1d(np.asarray(factor_weights, dtype=float))
    if w.shape != (x.shape[1],):
        raise ValidationError(f"{len(w)} factor weights for {x.shape[1]} factors")
    return standardize(x) @ w


def rank_assets(date: dt.date, assets: Sequence[str], scores) -> Ranking:
    """Order best (highest score) first; equal scores fall back to asset id ascending."""
    s = np.asarray(scores, dtype=float)
    assets = tuple(assets)
    if s.shape != (len(assets),):
        raise ValidationError("one score per asset required")
    order = sorted(range(len(assets)), key=lambda i: (-s[i], assets[i]))
    return Ranking(date, tuple(assets[i] for i in order), s[order])


def information_coefficient(ranking: Ranking, forward_returns) -> float:
    """Spearman correlation between ranking scores and realised forward returns.

    ``forward_returns`` is a mapping asset -> return or a vector aligned with
    ``ranking.assets``.
    """
    if isinstance(forward_returns, Mapping):
        if set(forward_returns) != set(ranking.assets):
            raise ValidationError("ranking and forward returns cover different universes")
        fwd = np.array([forward_returns[a] for a in ranking.assets], dtype=float)
    else:
        fwd = np.asarray(forward_returns, dtype=float)
        if fwd.shape != (len(ranking.assets),):
            raise ValidationError("forward returns must align with the ranking")
    if len(fwd) < 2:
        raise DegenerateInputError("IC needs at least 2 assets")
    return spearman(ranking.scores, fwd)


def information_ratio(ics: ICSeries) -> float:
    v = ics.ic_values
    if len(v) < 2:
        raise DegenerateInputError("information ratio needs at least 2 IC observations")
    sd = v.std(ddof=1)
    if sd == 0 or np.ptp(v) == 0:
        raise DegenerateInputError("IC series has zero standard deviation")
    return float(v.mean() / sd)


def hit_ratio(ics: ICSeries) -> float:
    v = ics.ic_values
    if len(v) == 0:
        raise DegenerateInputError("empty IC series")
    return float(np.count_nonzero(v > 0) / len(v))


def view_confidence(ir: float, hr: float, mode: str = "ir", ir_cap: float = DEFAULT_IR_CAP) -> float:
    """Map IC statistics to a confidence in [0, 1].

    ``mode="hit"`` uses the hit ratio directly, ``mode="ir"`` clamps
    ``ir / ir_cap`` to [0, 1]. A non-positive information ratio always maps
    to 0.
    """
    if mode not in CONFIDENCE_MODES:
        raise ValidationError(f"unknown confidence mode {mode!r}")
    if not 0.0 <= hr <= 1.0:
        raise ValidationError("hit ratio must lie in [0, 1]")
    if ir_cap <= 0:
        raise ValidationError("ir_cap must be positive")
    if not ir > 0:
        return 0.0
    if mode == "hit":
        return float(hr)
    return float(min(max(ir / ir_cap, 0.0), 1.0))


# ---------------------------------------------------------------------------
# Back-test helpers


def forward_returns(returns: ReturnPanel, date: dt.date, holding_period: int) -> np.ndarray | None:
    """Compounded return of each asset over the ``holding_period`` rows after ``date``.

    Returns ``None`` when the panel does not extend far enough.
    """
    ords = np.array([d.toordinal() for d in returns.dates])
    start = int(np.searchsorted(ords, date.toordinal(), side="right"))
    stop = start + holding_period
    if stop > len(returns):
        return None
    return np.prod(1.0 + returns.returns[start:stop], axis=0) - 1.0


def group_size(n_assets: int, quantile: float) -> int:
    if not 0.0 < quantile <= 0.5:
        raise ValidationError("quantile must lie in (0, 0.5]")
    if n_assets < 2.0 / quantile - 1e-9:
        raise ValidationError(f"universe of {n_assets} is smaller than 2/quantile")
    return max(1, int(math.floor(quantile * n_assets + 1e-9)))


def ic_series(rankings: Sequence[Ranking], returns: ReturnPanel, holding_period: int) -> ICSeries:
    """IC of each ranking against the realised forward returns that follow it.

    Rankings without a complete forward window are skipped.
    """
    dates, values = [], []
    for r in rankings:
        fwd = forward_returns(returns, r.date, holding_period)
        if fwd is None:
            continue
        values.append(information_coefficient(r, fwd[[returns.assets.index(a) for a in r.assets]]))
        dates.append(r.date)
    return ICSeries(tuple(dates), np.array(values), holding_period)


def build_view_signals(rankings: Sequence[Ranking], returns: ReturnPanel, holding_period: int,
                       quantile: float, mode: str = "ir", ir_cap: float = DEFAULT_IR_CAP,
                       label: str = "") -> list[ViewSignal]:
    """Relative view long the top quantile / short the bottom quantile of the latest ranking.

    The expected outperformance is the historical mean top-minus-bottom spread
    per holding period over every ranking with a complete forward window; IR,
    hit ratio and confidence come from the IC series of those rankings.
    """
    if holding_period < 1:
        raise ValidationError("holding period must be positive")
    if not rankings:
        raise ValidationError("no rankings supplied")
    k = group_size(len(returns.assets), quantile)
    col = {a: i for i, a in enumerate(returns.assets)}
    spreads, ics, dates = [], [], []
    for r in rankings:
        fwd = forward_returns(returns, r.date, holding_period)
        if fwd is None:
            continue
        ordered = fwd[[col[a] for a in r.assets]]
        spreads.append(ordered[:k].mean() - ordered[-k:].mean())
        ics.append(information_coefficient(r, ordered))
        dates.append(r.date)
    if len(ics) < 2:
        raise DegenerateInputError("need at least 2 holding periods of history")
    series = ICSeries(tuple(dates), np.array(ics), holding_period)
    hr = hit_ratio(series)
    try:
        ir = information_ratio(series)
    except DegenerateInputError:
        # constant IC: perfectly stable sign, unbounded ratio
        m = series.ic_values.mean()
        ir = math.copysign(math.inf, m) if m != 0 else 0.0
    conf = view_confidence(ir, hr, mode, ir_cap)
    latest = max(rankings, key=lambda r: r.date)
    return [ViewSignal(frozenset(latest.assets[:k]), frozenset(latest.assets[-k:]),
                       float(np.mean(spreads)), float(ir), hr, conf, label)]


def split_in_out_sample(dates: Sequence[dt.date], in_sample_fraction: float = 0.5
                        ) -> tuple[tuple[dt.date, ...], tuple[dt.date, ...]]:
    """Chronological split into disjoint fitting and evaluation windows."""
    if not 0.0 < in_sample_fraction < 1.0:
        raise ValidationError("in-sample fraction must lie in (0, 1)")
    dates = tuple(sorted(dates))
    cut = int(round(len(dates) * in_sample_fraction))
    if cut < 1 or cut >= len(dates):
        raise DegenerateInputError("split leaves an empty window")
    return dates[:cut], dates[cut:]


def simplex_grid(n_factors: int, step: float) -> np.ndarray:
    """All non-negative weight vectors on a lattice of spacing ``step`` summing to 1."""
    m = int(round(1.0 / step))
    if m < 1 or abs(m * step - 1.0) > 1e-9:
        raise ValidationError("step must divide 1")
    pts = [c for c in itertools.product(range(m + 1), repeat=n_factors) if sum(c) == m]
    return np.array(pts, dtype=float) / m


def optimize_factor_weights(exposures_by_date: Mapping[dt.date, np.ndarray], assets: Sequence[str],
                            returns: ReturnPanel, holding_period: int,
                            step: float = 0.1) -> tuple[np.ndarray, float]:
    """Grid search over the weight simplex for the highest mean IC.

    Returns ``(weights, mean_ic)``; ties keep the first grid point in
    lexicographic order.
    """
    dates = sorted(exposures_by_date)
    if not dates:
        raise ValidationError("no exposures supplied")
    k = np.asarray(exposures_by_date[dates[0]]).shape[1]
    best_w, best_ic = None, -np.inf
    for w in simplex_grid(k, step):
        try:
            rankings = [rank_assets(d, assets, composite_score(exposures_by_date[d], w))
                        for d in dates]
            ics = ic_series(rankings, returns, holding_period).ic_values
        except DegenerateInputError:
            # offsetting factors can cancel into a constant score that ranks nothing
            continue
        if len(ics) == 0:
            raise DegenerateInputError("no ranking has a complete forward window")
        m = ics.mean()
        if m > best_ic + 1e-15:
            best_w, best_ic = w, m
    if best_w is None:
        raise DegenerateInputError("every factor weighting gives a degenerate ranking")
    return best_w, float(best_ic)
