"""Rebalancing decisions: tracking error, the analytic trigger point, band and
periodic rules, and a value-iteration rebalancer over a weight grid.

Dynamic-programming model
-------------------------
State ``w`` is the weight vector (on the simplex). An action picks the
post-trade weights ``g = w + u``; the period cost is

    G = cost_rate * sum|u| + eps(g),   eps(g) = U(w*) - U(g),
    U(w) = mu'w - (a/2) w' Sigma w,

and the next state is ``(1 + n) * g`` renormalised to sum to one. When no
expected returns are given, ``mu = a Sigma w*`` (the returns that make ``w*``
optimal), which reduces ``eps`` to ``(a/2)(g - w*)' Sigma (g - w*)``.

The value table lives on a product grid over the first N-1 weights (the last
weight is the remainder). Successor states falling between grid points are
valued by multilinear interpolation. The expectation over ``n`` is taken over
a finite scenario set: exact for :class:`DiscreteReturns`, a seeded
Monte-Carlo sample for :class:`LognormalReturns`.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy import sparse

from .errors import ConvergenceError, DegenerateInputError, ValidationError

TIE_TOL = 1e-12


# ---------------------------------------------------------------------------
# Simple rules


def tracking_error(portfolio_returns, benchmark_returns) -> float:
    """Sample standard deviation (n - 1) of active returns."""
    p = np.asarray(portfolio_returns, dtype=float)
    b = np.asarray(benchmark_returns, dtype=float)
    if p.shape != b.shape or p.ndim != 1:
        raise ValidationError("portfolio and benchmark series must have equal length")
    if len(p) < 2:
        raise DegenerateInputError("tracking error needs at least 2 observations")
    return float(np.std(p - b, ddof=1))


@dataclass(frozen=True)
class TriggerInput:
    risk_tolerance: float
    cost: float | np.ndarray
    sigma_i: float | np.ndarray
    sigma_p: float
    rho_ip: float | np.ndarray

    def __post_init__(self):
        if not self.risk_tolerance > 0:
            raise ValidationError("risk tolerance K must be positive")
        if np.any(np.asarray(self.sigma_i) < 0) or self.sigma_p < 0:
            raise ValidationError("volatilities must be non-negative")
        if np.any(np.abs(np.asarray(self.rho_ip)) > 1):
            raise ValidationError("correlation must lie in [-1, 1]")


def trigger_point(inp: TriggerInput):
    """K C_i / (s_i^2 + s_p^2 - 2 s_i s_p rho_ip); rebalance when below one.

    Vectorises over assets when ``cost``/``sigma_i``/``rho_ip`` are arrays.
    """
    c = np.asarray(inp.cost, dtype=float)
    si = np.asarray(inp.sigma_i, dtype=float)
    rho = np.asarray(inp.rho_ip, dtype=float)
    denom = si ** 2 + inp.sigma_p ** 2 - 2.0 * si * inp.sigma_p * rho
    if np.any(denom <= 0):
        raise DegenerateInputError("trigger denominator is zero: asset moves one-for-one with the portfolio")
    out = inp.risk_tolerance * c / denom
    return float(out) if out.ndim == 0 else out


def should_trigger(inp: TriggerInput) -> bool:
    """Rebalance if any asset's trigger point is below one."""
    return bool(np.any(np.asarray(trigger_point(inp)) < 1.0))


@dataclass(frozen=True)
class PolicyDecision:
    rebalance: bool
    trades: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.trades, dtype=float)
        object.__setattr__(self, "trades", t)
        if not self.rebalance and np.any(t != 0):
            raise ValidationError("a no-rebalance decision cannot carry trades")


def _aligned(weights, targets):
    w = np.asarray(weights, dtype=float)
    t = np.asarray(targets, dtype=float)
    if w.shape != t.shape:
        raise ValidationError("weights and targets are misaligned")
    return w, t


def band_policy(weights, targets, band: float) -> PolicyDecision:
    """Full rebalance iff some |w_i - w*_i| strictly exceeds ``band``."""
    w, t = _aligned(weights, targets)
    if not band > 0:
        raise ValidationError("band must be positive")
    if np.any(np.abs(w - t) > band):
        return PolicyDecision(True, t - w)
    return PolicyDecision(False, np.zeros_like(w))


def periodic_policy(t: int, period: int, weights=None, targets=None) -> PolicyDecision:
    """Rebalance iff ``t % period == 0``; trades are filled in when weights are given."""
    if period < 1:
        raise ValidationError("period must be >= 1")
    fire = t % period == 0
    if weights is None:
        return PolicyDecision(fire, np.zeros(0))
    w, tg = _aligned(weights, targets)
    return PolicyDecision(fire, tg - w if fire else np.zeros_like(w))


# ---------------------------------------------------------------------------
# Return models


@dataclass(frozen=True)
class DiscreteReturns:
    """Finite distribution of per-period simple return vectors."""

    outcomes: np.ndarray
    probabilities: np.ndarray

    def __post_init__(self):
        o = np.atleast_2d(np.asarray(self.outcomes, dtype=float))
        p = np.asarray(self.probabilities, dtype=float)
        if p.shape != (len(o),):
            raise ValidationError("one probability per outcome")
        if np.any(p < 0) or abs(p.sum() - 1) > 1e-12:
            raise ValidationError("probabilities must be non-negative and sum to 1")
        if np.any(o <= -1):
            raise ValidationError("returns must exceed -1")
        object.__setattr__(self, "outcomes", o)
        object.__setattr__(self, "probabilities", p)

    @property
    def n_assets(self) -> int:
        return self.outcomes.shape[1]

    def mean(self) -> np.ndarray:
        return self.probabilities @ self.outcomes

    def covariance(self) -> np.ndarray:
        d = self.outcomes - self.mean()
        return (d * self.probabilities[:, None]).T @ d

    def scenarios(self, n_paths: int, rng) -> tuple[np.ndarray, np.ndarray]:
        return self.outcomes, self.probabilities

    def sample(self, rng, size) -> np.ndarray:
        idx = rng.choice(len(self.probabilities), size=size, p=self.probabilities)
        return self.outcomes[idx]


@dataclass(frozen=True)
class LognormalReturns:
    """i.i.d. lognormal gross returns: ``1 + n = exp(drift + L z)``."""

    drift: np.ndarray
    volatility: np.ndarray
    correlation: np.ndarray | None = None

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.drift, dtype=float))
        v = np.broadcast_to(np.asarray(self.volatility, dtype=float), d.shape).copy()
        if np.any(v < 0):
            raise ValidationError("volatility must be non-negative")
        c = np.eye(len(d)) if self.correlation is None else np.asarray(self.correlation, float)
        if c.shape != (len(d), len(d)):
            raise ValidationError("correlation must be N x N")
        object.__setattr__(self, "drift", d)
        object.__setattr__(self, "volatility", v)
        object.__setattr__(self, "correlation", c)

    @property
    def n_assets(self) -> int:
        return len(self.drift)

    def _log_cov(self) -> np.ndarray:
        return self.correlation * np.outer(self.volatility, self.volatility)

    def mean(self) -> np.ndarray:
        return np.exp(self.drift + 0.5 * self.volatility ** 2) - 1.0

    def covariance(self) -> np.ndarray:
        s = self._log_cov()
        m = self.drift + 0.5 * self.volatility ** 2
        return np.exp(m[:, None] + m[None, :]) * (np.exp(s) - 1.0)

    def sample(self, rng, size) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        z = rng.standard_normal(shape + (self.n_assets,))
        s = self._log_cov()
        w, q = np.linalg.eigh(s)
        root = q * np.sqrt(np.clip(w, 0, None))
        return np.exp(self.drift + z @ root.T) - 1.0

    def scenarios(self, n_paths: int, rng) -> tuple[np.ndarray, np.ndarray]:
        return self.sample(rng, n_paths), np.full(n_paths, 1.0 / n_paths)


class ReturnModel(Protocol):
    n_assets: int

    def mean(self) -> np.ndarray: ...
    def covariance(self) -> np.ndarray: ...
    def scenarios(self, n_paths: int, rng) -> tuple[np.ndarray, np.ndarray]: ...
    def sample(self, rng, size) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# Tracking cost


@dataclass(frozen=True)
class QuadraticUtility:
    """U(w) = mu'w - (a/2) w' Sigma w; ``shortfall`` is U(w*) - U(w)."""

    mu: np.ndarray
    sigma: np.ndarray
    risk_aversion: float
    target: np.ndarray

    @classmethod
    def for_target(cls, target, sigma, risk_aversion: float, mu=None) -> "QuadraticUtility":
        target = np.asarray(target, dtype=float)
        sigma = np.asarray(sigma, dtype=float)
        if not risk_aversion > 0:
            raise ValidationError("utility risk aversion must be positive")
        if mu is None:
            mu = risk_aversion * sigma @ target
        return cls(np.asarray(mu, dtype=float), sigma, float(risk_aversion), target)

    def value(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        return w @ self.mu - 0.5 * self.risk_aversion * np.einsum("...i,ij,...j->...", w, self.sigma, w)

    def shortfall(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        d = w - self.target
        at = np.all(np.abs(d) <= 1e-15, axis=-1)
        out = self.value(self.target) - self.value(w)
        return np.where(at, 0.0, out)


# ---------------------------------------------------------------------------
# Grid and interpolation


@dataclass(frozen=True)
class WeightGrid:
    """Product grid over the first N-1 weights; the last weight is the remainder."""

    axes: tuple[np.ndarray, ...]

    @classmethod
    def build(cls, targets, resolution: int) -> "WeightGrid":
        t = np.asarray(targets, dtype=float)
        if len(t) < 2:
            raise ValidationError("rebalancing needs at least 2 assets")
        if resolution < 2:
            raise ValidationError("grid needs at least 2 points per asset")
        base = np.linspace(0.0, 1.0, resolution)
        axes = []
        for x in t[:-1]:
            ax = np.union1d(base, [x])
            # merge float duplicates of the target
            keep = np.concatenate([[True], np.diff(ax) > 1e-12])
            ax = ax[keep]
            ax[np.argmin(np.abs(ax - x))] = x
            axes.append(ax)
        return cls(tuple(axes))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(a) for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def points(self) -> np.ndarray:
        """All grid states as full weight vectors [S x N]."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        head = np.column_stack([m.ravel() for m in mesh])
        return np.column_stack([head, 1.0 - head.sum(axis=1)])

    def index_of(self, w) -> int:
        w = np.asarray(w, dtype=float)
        idx = []
        for ax, x in zip(self.axes, w[:-1]):
            j = int(np.argmin(np.abs(ax - x)))
            if abs(ax[j] - x) > 1e-12:
                raise ValidationError(f"weight {x} is not on the grid")
            idx.append(j)
        return int(np.ravel_multi_index(idx, self.shape))

    def interpolation(self, w) -> tuple[np.ndarray, np.ndarray]:
        """Vertex indices and multilinear weights for each row of ``w`` [P x N].

        Returns arrays of shape [P x 2^(N-1)].
        """
        w = np.atleast_2d(np.asarray(w, dtype=float))
        d = len(self.axes)
        lo, frac = [], []
        for k, ax in enumerate(self.axes):
            x = np.clip(w[:, k], ax[0], ax[-1])
            j = np.clip(np.searchsorted(ax, x, side="right") - 1, 0, len(ax) - 2)
            t = (x - ax[j]) / (ax[j + 1] - ax[j])
            lo.append(j)
            frac.append(np.clip(t, 0.0, 1.0))
        verts, wts = [], []
        for corner in itertools.product((0, 1), repeat=d):
            idx = [lo[k] + corner[k] for k in range(d)]
            wt = np.ones(len(w))
            for k in range(d):
                wt = wt * (frac[k] if corner[k] else 1.0 - frac[k])
            verts.append(np.ravel_multi_index(idx, self.shape))
            wts.append(wt)
        return np.column_stack(verts), np.column_stack(wts)

    def interpolate(self, table, w) -> np.ndarray:
        v, wt = self.interpolation(w)
        return (np.asarray(table)[v] * wt).sum(axis=1)


def drift_weights(post_trade, gross_returns) -> np.ndarray:
    """(1 + n) * g renormalised to sum to one (self-financing drift)."""
    grown = np.asarray(post_trade) * (1.0 + np.asarray(gross_returns))
    return grown / grown.sum(axis=-1, keepdims=True)


def _expectation_matrix(grid: WeightGrid, targets: np.ndarray, outcomes, probs) -> sparse.csr_matrix:
    """Row a: distribution over grid vertices of the successor of post-trade weights ``targets[a]``."""
    a_count, m = len(targets), len(probs)
    nxt = drift_weights(targets[:, None, :], outcomes[None, :, :]).reshape(a_count * m, -1)
    verts, wts = grid.interpolation(nxt)
    rows = np.repeat(np.arange(a_count), m * verts.shape[1])
    vals = (wts * np.tile(probs, a_count)[:, None]).ravel()
    mat = sparse.csr_matrix((vals, (rows, verts.ravel())), shape=(a_count, grid.size))
    mat.sum_duplicates()
    return mat


# ---------------------------------------------------------------------------
# Value iteration


@dataclass(frozen=True)
class DPConfig:
    """Settings of the value-iteration rebalancer.

    ``horizon=None`` iterates the discounted Bellman operator to its fixed
    point; an integer runs exactly that many backward stages from a zero
    terminal value. ``actions`` optionally restricts the candidate post-trade
    weights (default: every feasible grid point); holding the current weights
    is always a candidate.
    """

    target_weights: np.ndarray
    grid: int = 11
    cost_rate: float = 0.001
    risk_aversion: float = 2.0
    expected_returns: np.ndarray | None = None
    paths: int = 1000
    convergence_tol: float = 1e-10
    max_iterations: int = 10_000
    discount: float = 0.95
    horizon: int | None = None
    seed: int = 0
    actions: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.target_weights, dtype=float)
        object.__setattr__(self, "target_weights", t)
        if np.any(t < 0) or abs(t.sum() - 1) > 1e-9:
            raise ValidationError("target weights must lie on the simplex")
        if self.cost_rate < 0:
            raise ValidationError("cost rate must be non-negative")
        if self.paths < 1:
            raise ValidationError("paths must be >= 1")
        if not 0 < self.discount <= 1:
            raise ValidationError("discount must lie in (0, 1]")
        if self.horizon is None and self.discount >= 1:
            raise ValidationError("infinite-horizon iteration needs discount < 1")
        if self.horizon is not None and self.horizon < 1:
            raise ValidationError("horizon must be >= 1")
        if self.convergence_tol <= 0 or self.max_iterations < 1:
            raise ValidationError("invalid convergence settings")
        if self.actions is not None:
            a = np.atleast_2d(np.asarray(self.actions, dtype=float))
            if a.shape[1] != len(t):
                raise ValidationError("action weights must have one entry per asset")
            if np.any(a < -1e-12) or np.any(np.abs(a.sum(axis=1) - 1) > 1e-9):
                raise ValidationError("action leaves the simplex")
            object.__setattr__(self, "actions", a)


@dataclass(frozen=True)
class DPResult:
    grid: WeightGrid
    states: np.ndarray           # [S x N]
    feasible: np.ndarray         # [S] bool: state lies on the simplex
    action_targets: np.ndarray   # [A x N] post-trade weights
    value: np.ndarray            # [S] J*(w) (stage 0 for finite horizons)
    policy: np.ndarray           # [S] chosen option: -1 hold, else action index
    iterations: int
    residual: float
    config: DPConfig
    utility: QuadraticUtility
    action_continuation: np.ndarray = field(repr=False)   # [stages x A]
    hold_continuation: np.ndarray = field(repr=False)     # [stages x S]
    stage_values: np.ndarray | None = field(default=None, repr=False)
    stage_policies: np.ndarray | None = field(default=None, repr=False)

    def post_trade(self, policy=None) -> np.ndarray:
        pol = self.policy if policy is None else policy
        out = self.states.copy()
        moved = pol >= 0
        out[moved] = self.action_targets[pol[moved]]
        return out

    @property
    def trades(self) -> np.ndarray:
        return self.post_trade() - self.states

    def policy_table(self, stage: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
        """(state, u*) for every feasible grid state."""
        pol = self.policy if self.stage_policies is None else self.stage_policies[stage]
        targets = self.post_trade(pol)
        return [(self.states[s], targets[s] - self.states[s])
                for s in np.flatnonzero(self.feasible)]

    def decide(self, t: int, w) -> PolicyDecision:
        u = self.decide_batch(t, np.atleast_2d(w))[0]
        return PolicyDecision(bool(np.any(u != 0)), u)

    def decide_batch(self, t: int, weights) -> np.ndarray:
        """One-step lookahead at arbitrary (off-grid) weights using the value table."""
        w = np.atleast_2d(np.asarray(weights, dtype=float))
        stage = 0 if self.stage_values is None else min(t, len(self.action_continuation) - 1)
        c, g = self.config.cost_rate, self.config.discount
        act = (c * np.abs(self.action_targets[None, :, :] - w[:, None, :]).sum(axis=2)
               + self.utility.shortfall(self.action_targets)[None, :]
               + g * self.action_continuation[stage][None, :])
        hold = self.utility.shortfall(w) + g * self.grid.interpolate(self.hold_continuation[stage], w)
        q = np.column_stack([hold, act])
        sizes = np.column_stack([np.zeros(len(w)),
                                 np.abs(self.action_targets[None, :, :] - w[:, None, :]).sum(axis=2)])
        choice = _argmin_smallest_trade(q, sizes)
        out = np.zeros_like(w)
        moved = choice > 0
        out[moved] = self.action_targets[choice[moved] - 1] - w[moved]
        return out


def _argmin_smallest_trade(q: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """Row-wise argmin; near-ties go to the smallest trade, then the lowest index."""
    best = q.min(axis=1, keepdims=True)
    tol = TIE_TOL * np.maximum(1.0, np.abs(best))
    key = np.where(q <= best + tol, sizes, np.inf)
    smallest = key.min(axis=1, keepdims=True)
    cand = key <= smallest + 1e-15
    return np.argmax(cand, axis=1)


def dp_rebalance(config: DPConfig, return_model: ReturnModel) -> DPResult:
    """Value iteration for the rebalancing problem described in the module docstring."""
    target = config.target_weights
    if return_model.n_assets != len(target):
        raise ValidationError("return model and targets cover different numbers of assets")
    cov = np.asarray(return_model.covariance(), dtype=float)
    if not np.all(np.isfinite(cov)):
        raise ValidationError("return model must have finite variance")
    utility = QuadraticUtility.for_target(target, cov, config.risk_aversion, config.expected_returns)
    grid = WeightGrid.build(target, config.grid)
    states = grid.points()
    feasible = states[:, -1] >= -1e-12
    states[np.abs(states) < 1e-15] = 0.0
    actions = states[feasible] if config.actions is None else config.actions
    actions = np.clip(actions, 0.0, None)
    actions = actions / actions.sum(axis=1, keepdims=True)

    sf_states = utility.shortfall(states)
    sf_actions = utility.shortfall(actions)
    if config.expected_returns is not None and (
            np.min(sf_actions) < -1e-12 or np.min(sf_states[feasible]) < -1e-12):
        raise ValidationError("target weights are not optimal under the supplied expected returns")

    rng = np.random.default_rng(config.seed)
    outcomes, probs = return_model.scenarios(config.paths, rng)
    m_act = _expectation_matrix(grid, actions, outcomes, probs)
    m_hold = _expectation_matrix(grid, np.clip(states, 0.0, None) / np.clip(states, 0.0, None).sum(1, keepdims=True),
                                 outcomes, probs)

    trade = np.abs(actions[None, :, :] - states[:, None, :]).sum(axis=2)      # [S x A]
    immediate = config.cost_rate * trade + sf_actions[None, :]
    hold_immediate = np.where(feasible, sf_states, np.inf)
    sizes = np.column_stack([np.zeros(len(states)), trade])
    gamma = config.discount

    def sweep(j):
        ea, eh = m_act @ j, m_hold @ j
        q = np.column_stack([hold_immediate + gamma * eh, immediate + gamma * ea[None, :]])
        choice = _argmin_smallest_trade(q, sizes)
        return q[np.arange(len(q)), choice], choice - 1, ea, eh

    if config.horizon is None:
        j = np.zeros(grid.size)
        residual = np.inf
        for it in range(1, config.max_iterations + 1):
            j_new, pol, ea, eh = sweep(j)
            residual = float(np.max(np.abs(j_new - j)))
            j = j_new
            if residual < config.convergence_tol:
                break
        else:
            raise ConvergenceError(
                f"value iteration did not converge in {config.max_iterations} sweeps "
                f"(residual {residual:.3g})", residual=residual)
        # policy and continuation consistent with the returned fixed point
        _, pol, ea, eh = sweep(j)
        return DPResult(grid, states, feasible, actions, j, pol, it, residual, config, utility,
                        ea[None, :], eh[None, :])

    h = config.horizon
    values = np.zeros((h + 1, grid.size))
    policies = np.zeros((h, grid.size), dtype=int)
    conts_a = np.zeros((h, len(actions)))
    conts_h = np.zeros((h, grid.size))
    for t in range(h - 1, -1, -1):
        values[t], policies[t], conts_a[t], conts_h[t] = sweep(values[t + 1])
    return DPResult(grid, states, feasible, actions, values[0], policies[0], h, 0.0, config,
                    utility, conts_a, conts_h, values, policies)


# ---------------------------------------------------------------------------
# Policies and simulation


class BatchPolicy(Protocol):
    name: str

    def decide_batch(self, t: int, weights: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class PeriodicPolicy:
    targets: np.ndarray
    period: int
    name: str = "periodic"

    def decide_batch(self, t, weights):
        if periodic_policy(t, self.period).rebalance:
            return np.asarray(self.targets) - weights
        return np.zeros_like(weights)


@dataclass(frozen=True)
class BandPolicy:
    targets: np.ndarray
    band: float
    name: str = "band"

    def decide_batch(self, t, weights):
        if not self.band > 0:
            raise ValidationError("band must be positive")
        d = np.asarray(self.targets) - weights
        fire = np.any(np.abs(d) > self.band, axis=1)
        return np.where(fire[:, None], d, 0.0)


@dataclass(frozen=True)
class TriggerPolicy:
    """Full rebalance when off target and any asset's trigger point is below one."""

    targets: np.ndarray
    risk_tolerance: float
    costs: np.ndarray
    covariance: np.ndarray
    name: str = "trigger"

    def decide_batch(self, t, weights):
        cov = np.asarray(self.covariance)
        sig = np.sqrt(np.diag(cov))
        out = np.zeros_like(weights)
        for p, w in enumerate(weights):
            var_p = w @ cov @ w
            sp = np.sqrt(max(var_p, 0.0))
            with np.errstate(divide="ignore", invalid="ignore"):
                rho = np.where(sig * sp > 0, (cov @ w) / (sig * sp), 0.0)
            inp = TriggerInput(self.risk_tolerance, self.costs, sig, sp, np.clip(rho, -1, 1))
            d = np.asarray(self.targets) - w
            if np.any(np.abs(d) > 1e-12) and should_trigger(inp):
                out[p] = d
        return out


@dataclass(frozen=True)
class DPPolicy:
    result: DPResult
    name: str = "dp"

    def decide_batch(self, t, weights):
        return self.result.decide_batch(t, weights)


@dataclass(frozen=True)
class SimulationStats:
    policy: str
    mean_cost: float
    mean_transaction_cost: float
    mean_tracking_cost: float
    mean_tracking_error: float
    trades_per_path: float
    cost_standard_error: float
    path_costs: np.ndarray = field(repr=False)


def simulate_rebalancing(policy: BatchPolicy, paths: int, horizon: int, return_model: ReturnModel,
                         cost_rate: float, targets, *, risk_aversion: float = 2.0, initial=None,
                         seed: int = 0, draws: np.ndarray | None = None,
                         utility: QuadraticUtility | None = None) -> SimulationStats:
    """Monte-Carlo cost of a policy: per period ``cost_rate*sum|u| + eps(w + u)``.

    ``draws`` [horizon x paths x N] lets several policies share the same
    return paths; otherwise they are drawn from ``return_model`` with ``seed``.
    """
    if horizon < 1:
        raise ValidationError("horizon must be >= 1")
    if paths < 1:
        raise ValidationError("paths must be >= 1")
    targets = np.asarray(targets, dtype=float)
    if draws is None:
        draws = return_model.sample(np.random.default_rng(seed), (horizon, paths))
    if draws.shape != (horizon, paths, len(targets)):
        raise ValidationError("return draws have the wrong shape")
    if utility is None:
        utility = QuadraticUtility.for_target(targets, return_model.covariance(), risk_aversion)
    w = np.tile(targets if initial is None else np.asarray(initial, float), (paths, 1))
    tc = np.zeros(paths)
    track = np.zeros(paths)
    n_trades = np.zeros(paths)
    active = np.zeros((horizon, paths))
    for t in range(horizon):
        u = policy.decide_batch(t, w)
        traded = np.abs(u).sum(axis=1)
        n_trades += traded > 1e-12
        tc += cost_rate * traded
        held = w + u
        track += utility.shortfall(held)
        n = draws[t]
        active[t] = (held * n).sum(axis=1) - n @ targets
        w = drift_weights(held, n)
    total = tc + track
    te = active.std(axis=0, ddof=1) if horizon >= 2 else np.zeros(paths)
    se = total.std(ddof=1) / np.sqrt(paths) if paths > 1 else 0.0
    return SimulationStats(policy.name, float(total.mean()), float(tc.mean()), float(track.mean()),
                           float(te.mean()), float(n_trades.mean()), float(se), total)


def compare_policies(policies: Sequence[BatchPolicy], paths: int, horizon: int,
                     return_model: ReturnModel, cost_rate: float, targets, *,
                     risk_aversion: float = 2.0, seed: int = 0, initial=None) -> list[SimulationStats]:
    """Simulate every policy on one shared set of return paths."""
    draws = return_model.sample(np.random.default_rng(seed), (horizon, paths))
    return [simulate_rebalancing(p, paths, horizon, return_model, cost_rate, targets,
                                 risk_aversion=risk_aversion, initial=initial, draws=draws)
            for p in policies]


POLICY_COLUMNS = ("policy", "mean_cost", "mean_tracking_error", "trades_per_path")


def write_policy_comparison(stats: Sequence[SimulationStats], path) -> None:
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(POLICY_COLUMNS)
        for s in stats:
            out.writerow([s.policy, repr(s.mean_cost), repr(s.mean_tracking_error),
                          repr(s.trades_per_path)])
