"""Black-Litterman construction: implied equilibrium returns, views with
IC-derived confidences, posterior returns and weights."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg

from .econometrics import CovarianceEstimate, condition_covariance
from .errors import DegenerateInputError, ValidationError
from .selection import ViewSignal

DEFAULT_TAU = 0.05
OMEGA_FLOOR = 1e-12


@dataclass(frozen=True)
class EquilibriumInput:
    """Risk aversion, covariance and market weights.

    ``sigma`` is conditioned on construction (ridge added only if near-singular)
    and the conditioned matrix is what every downstream formula uses.
    """

    risk_aversion: float
    sigma: np.ndarray
    market_weights: np.ndarray

    def __post_init__(self):
        s = self.sigma.matrix if isinstance(self.sigma, CovarianceEstimate) else self.sigma
        w = np.asarray(self.market_weights, dtype=float)
        s = np.asarray(s, dtype=float)
        if not self.risk_aversion > 0:
            raise ValidationError("risk aversion must be positive")
        if s.shape != (len(w), len(w)):
            raise ValidationError("covariance dimensions do not match the weights")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValidationError("market weights must sum to 1")
        object.__setattr__(self, "sigma", condition_covariance(s))
        object.__setattr__(self, "market_weights", w)

    @property
    def n_assets(self) -> int:
        return len(self.market_weights)


@dataclass(frozen=True)
class ViewSet:
    pick_matrix: np.ndarray
    view_returns: np.ndarray
    omega: np.ndarray
    confidences: np.ndarray
    tau: float = DEFAULT_TAU
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        p = np.asarray(self.pick_matrix, dtype=float)
        if p.ndim != 2:
            p = p.reshape(len(self.view_returns), -1)
        object.__setattr__(self, "pick_matrix", p)
        object.__setattr__(self, "view_returns", np.asarray(self.view_returns, dtype=float))
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float).reshape(len(p), len(p)))
        object.__setattr__(self, "confidences", np.asarray(self.confidences, dtype=float))
        if not self.tau > 0:
            raise ValidationError("tau must be positive")
        k = len(p)
        if k > p.shape[1] and p.shape[1] > 0:
            raise ValidationError("more views than assets")
        if np.any(np.diag(self.omega) <= 0) or np.any(self.omega != np.diag(np.diag(self.omega))):
            raise ValidationError("omega must be diagonal with positive entries")
        if np.any((self.confidences < 0) | (self.confidences > 1)):
            raise ValidationError("confidences must lie in [0, 1]")

    @property
    def n_views(self) -> int:
        return len(self.view_returns)

    @classmethod
    def empty(cls, n_assets: int, tau: float = DEFAULT_TAU) -> "ViewSet":
        return cls(np.zeros((0, n_assets)), np.zeros(0), np.zeros((0, 0)), np.zeros(0), tau)


@dataclass(frozen=True)
class PosteriorResult:
    combined_returns: np.ndarray
    weights: np.ndarray
    prior_returns: np.ndarray


def _sigma(eq_or_sigma) -> np.ndarray:
    if isinstance(eq_or_sigma, EquilibriumInput):
        return eq_or_sigma.sigma
    if isinstance(eq_or_sigma, CovarianceEstimate):
        return eq_or_sigma.matrix
    return np.asarray(eq_or_sigma, dtype=float)


def implied_equilibrium_returns(eq: EquilibriumInput) -> np.ndarray:
    """Pi = lambda * Sigma * w_mkt."""
    return eq.risk_aversion * eq.sigma @ eq.market_weights


def pick_row(universe: Sequence[str], long: Iterable[str], short: Iterable[str] | None) -> np.ndarray:
    """+1/|long| on long members, -1/|short| on short members (absolute view if no short)."""
    universe = list(universe)
    long, short = list(long), list(short or [])
    if not long:
        raise ValidationError("view has an empty long group")
    if set(long) & set(short):
        raise ValidationError("view has overlapping long and short members")
    col = {a: i for i, a in enumerate(universe)}
    unknown = [a for a in long + short if a not in col]
    if unknown:
        raise ValidationError(f"view references assets outside the universe: {unknown}")
    row = np.zeros(len(universe))
    for a in long:
        row[col[a]] += 1.0 / len(long)
    for a in short:
        row[col[a]] -= 1.0 / len(short)
    return row


def omega_entry(p: np.ndarray, sigma: np.ndarray, tau: float, confidence: float) -> float:
    """(1/c - 1) * p tau Sigma p'; full confidence gets a tiny positive floor."""
    base = float(tau * p @ sigma @ p)
    if base <= 0:
        raise DegenerateInputError("view portfolio has zero variance")
    if confidence >= 1.0:
        return OMEGA_FLOOR * base
    return (1.0 / confidence - 1.0) * base


@dataclass(frozen=True)
class ViewSpec:
    """A single view in plain terms: long/short groups, expected return and confidence."""

    long: tuple[str, ...]
    short: tuple[str, ...]
    q: float
    confidence: float
    label: str = ""


def assemble_views(specs: Sequence[ViewSpec], universe: Sequence[str], sigma,
                   tau: float = DEFAULT_TAU) -> ViewSet:
    """(P, Q, Omega) from view specs; zero-confidence views are dropped."""
    s = _sigma(sigma)
    rows, q, om, conf, labels = [], [], [], [], []
    for v in specs:
        if not 0.0 <= v.confidence <= 1.0:
            raise ValidationError("confidence must lie in [0, 1]")
        row = pick_row(universe, sorted(v.long), sorted(v.short))
        if v.confidence == 0:
            continue
        rows.append(row)
        q.append(v.q)
        om.append(omega_entry(row, s, tau, v.confidence))
        conf.append(v.confidence)
        labels.append(v.label)
    if not rows:
        return ViewSet.empty(len(universe), tau)
    return ViewSet(np.array(rows), np.array(q), np.diag(om), np.array(conf), tau, tuple(labels))


def build_views(signals: Sequence[ViewSignal], universe: Sequence[str], sigma,
                tau: float = DEFAULT_TAU) -> ViewSet:
    """Assemble (P, Q, Omega) from view signals; zero-confidence views are dropped."""
    specs = [ViewSpec(tuple(sig.group_long), tuple(sig.group_short or ()),
                      sig.expected_outperformance, sig.confidence, sig.label) for sig in signals]
    return assemble_views(specs, universe, sigma, tau)


def posterior_returns(views: ViewSet, eq: EquilibriumInput) -> np.ndarray:
    """Posterior combined return vector.

    Evaluated in the algebraically identical update form
    ``Pi + tau S P' (P tau S P' + Omega)^-1 (Q - P Pi)``, which stays accurate
    when Omega is tiny (full-confidence views).
    """
    pi = implied_equilibrium_returns(eq)
    if views.n_views == 0:
        return pi
    p, q, omega, tau = views.pick_matrix, views.view_returns, views.omega, views.tau
    if p.shape[1] != eq.n_assets:
        raise ValidationError("pick matrix width does not match the universe")
    ts = tau * eq.sigma
    m = p @ ts @ p.T + omega
    try:
        c = linalg.cho_factor(0.5 * (m + m.T))
    except linalg.LinAlgError:
        raise DegenerateInputError("view covariance P tau Sigma P' + Omega is singular") from None
    return pi + ts @ p.T @ linalg.cho_solve(c, q - p @ pi)


def posterior_weights(er, eq: EquilibriumInput) -> np.ndarray:
    """Solve (lambda Sigma) w = E[R]."""
    er = np.asarray(er, dtype=float)
    try:
        c = linalg.cho_factor(eq.risk_aversion * eq.sigma)
    except linalg.LinAlgError:
        raise DegenerateInputError("lambda * Sigma is singular") from None
    return linalg.cho_solve(c, er)


def black_litterman(views: ViewSet, eq: EquilibriumInput) -> PosteriorResult:
    er = posterior_returns(views, eq)
    return PosteriorResult(er, posterior_weights(er, eq), implied_equilibrium_returns(eq))


def normalize_weights(weights, long_only: bool = False) -> np.ndarray:
    """Fully-invested rescaling of raw posterior weights (optionally clipping shorts first)."""
    w = np.asarray(weights, dtype=float)
    if long_only:
        w = np.clip(w, 0.0, None)
    total = w.sum()
    if not total > 0:
        raise DegenerateInputError("weights sum to a non-positive total; cannot normalise")
    return w / total
