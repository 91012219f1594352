"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS or FAIL line; run with ``pytest -m acceptance -s``.
"""

import contextlib
import filecmp
import time

import numpy as np
import pytest

import oracles
from quantcycle.attribution import (CurrencyLeg, PerformanceInput, SegmentData, brinson,
                                    currency_decomposition, timing_regression)
from quantcycle.black_litterman import (EquilibriumInput, ViewSet, ViewSpec, assemble_views,
                                        black_litterman, implied_equilibrium_returns,
                                        posterior_returns)
from quantcycle.config import load_config
from quantcycle.econometrics import covariance, spearman
from quantcycle.factor_model import (IndexFit, fit_single_index, portfolio_variance,
                                     security_covariance, security_variance)
from quantcycle.fixture import fixture_config_path
from quantcycle.marketdata import MarketSpec, cap_weights, compute_returns, synthetic_market
from quantcycle.pipeline import run_backtest
from quantcycle.rebalancing import (DiscreteReturns, DPConfig, TriggerInput, dp_rebalance,
                                    should_trigger, trigger_point)
from quantcycle.selection import information_coefficient, rank_assets, view_confidence
from quantcycle.tca import (ImpactParams, MarketStats, Order, calibrate_impact, predict_impact,
                            simulate_orders)

pytestmark = pytest.mark.acceptance


@contextlib.contextmanager
def criterion(number, title):
    """Print one PASS/FAIL line for the enclosed checks and re-raise failures."""
    try:
        yield
    except BaseException:
        print(f"\n[FAIL] {number:>2}. {title}")
        raise
    print(f"\n[PASS] {number:>2}. {title}")


def ten_asset_equilibrium():
    spec = MarketSpec(n_assets=10, n_dates=260, n_factors=1, volatility=0.012,
                      initial_price=tuple(20.0 + 15 * i for i in range(10)),
                      base_volume=tuple(1e6 * (1 + i % 4) for i in range(10)))
    panel = synthetic_market(101, spec)
    sigma = covariance(compute_returns(panel).returns).matrix
    return EquilibriumInput(2.5, sigma, cap_weights(panel, panel.dates[-1]))


def test_01_no_view_identity():
    with criterion(1, "BL no-view identity on 10 assets (max dev < 1e-9, < 1 s)"):
        start = time.perf_counter()
        eq = ten_asset_equilibrium()
        res = black_litterman(ViewSet.empty(10), eq)
        elapsed = time.perf_counter() - start
        assert np.abs(res.weights - eq.market_weights).max() < 1e-9
        assert elapsed < 1.0


def test_02_tau_invariance():
    with criterion(2, "BL tau-invariance across tau in {0.01, 0.05, 0.5} (1e-8 relative)"):
        eq = ten_asset_equilibrium()
        universe = tuple(f"A{i:02d}" for i in range(10))
        specs = [ViewSpec(("A02",), (), 0.01, 0.6), ViewSpec(("A05", "A06"), ("A01",), 0.004, 0.3)]
        outs = [posterior_returns(assemble_views(specs, universe, eq.sigma, tau), eq)
                for tau in (0.01, 0.05, 0.5)]
        for o in outs[1:]:
            assert np.abs(o - outs[0]).max() <= 1e-8 * np.abs(outs[0]).max()


def test_03_confidence_monotonicity_and_hand_oracle():
    with criterion(3, "BL confidence monotonicity and 2x2 hand-inversion oracle (1e-10)"):
        eq = ten_asset_equilibrium()
        universe = tuple(f"A{i:02d}" for i in range(10))
        ws = [black_litterman(assemble_views([ViewSpec(("A03",), (), 0.02, c)], universe, eq.sigma),
                              eq).weights[3] for c in np.arange(1, 10) / 10]
        assert all(b >= a for a, b in zip(ws, ws[1:]))

        sigma, w_mkt, tau = [[0.04, 0.012], [0.012, 0.09]], [0.6, 0.4], 0.05
        p, q, conf = [[1.0, -1.0], [0.0, 1.0]], [0.02, 0.05], [0.3, 0.7]
        omega = [(1 / c - 1) * tau * np.array(r) @ np.array(sigma) @ np.array(r) for r, c in zip(p, conf)]
        expected, _ = oracles.black_litterman_2x2(sigma, w_mkt, 2.5, tau, p, q, omega)
        got = posterior_returns(ViewSet(p, q, np.diag(omega), conf, tau),
                                EquilibriumInput(2.5, np.array(sigma), w_mkt))
        assert np.abs(got - expected).max() < 1e-10


def test_04_risk_decomposition_equivalence():
    with criterion(4, "single-index portfolio variance equals w'Sigma w on 1000 instances (1e-12)"):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(1, 12))
            assets = tuple(f"S{i}" for i in range(n))
            fit = IndexFit(assets, rng.normal(0, 0.001, n), rng.normal(1.0, 0.4, n),
                           rng.uniform(0.0, 0.003, n), rng.uniform(0.0001, 0.002))
            w = rng.normal(0, 1, n)
            sigma = [[security_variance(fit, a) if i == j else
                      security_covariance(fit.beta[i], fit.beta[j], fit.market_variance)
                      for j in range(n)] for i, a in enumerate(assets)]
            quad = sum(w[i] * sigma[i][j] * w[j] for i in range(n) for j in range(n))
            worst = max(worst, abs(portfolio_variance(w, fit) - quad) / abs(quad))
        assert worst < 1e-12


def test_05_ic_machinery():
    with criterion(5, "perfect-foresight IC = 1, negative IR gives confidence 0, Spearman oracle"):
        rng = np.random.default_rng(5)
        assets = tuple(f"A{i}" for i in range(8))
        fwd = rng.normal(0, 0.02, 8)
        ranking = rank_assets(None, assets, fwd)
        assert information_coefficient(ranking, dict(zip(assets, fwd))) == 1.0

        for ir, hr in zip(-rng.uniform(1e-9, 10, 1000), rng.uniform(0, 1, 1000)):
            assert view_confidence(ir, hr, "ir") == 0.0
            assert view_confidence(ir, hr, "hit") == 0.0

        checked = 0
        while checked < 1000:
            n = int(rng.integers(3, 30))
            a, b = rng.integers(-5, 6, n), rng.integers(-5, 6, n)
            if len(set(a)) < 2 or len(set(b)) < 2:
                continue
            assert abs(spearman(a, b) - oracles.spearman(a.tolist(), b.tolist())) < 1e-12
            checked += 1


def test_06_rebalancing_trigger():
    with criterion(6, "trigger point hand oracle 0.02105... and monotonicity over 100 points"):
        inp = TriggerInput(1.0, 0.001, 0.25, 0.15, 0.5)
        assert f"{trigger_point(inp):.5f}" == "0.02105"
        assert should_trigger(inp)
        sweep = np.linspace(0.0001, 0.05, 100)
        by_cost = [trigger_point(TriggerInput(1.0, c, 0.25, 0.15, 0.5)) for c in sweep]
        by_k = [trigger_point(TriggerInput(k, 0.001, 0.25, 0.15, 0.5)) for k in sweep * 100]
        assert all(b > a for a, b in zip(by_cost, by_cost[1:]))
        assert all(b > a for a, b in zip(by_k, by_k[1:]))


def test_07_dp_toy_optimality():
    with criterion(7, "DP equals exhaustive enumeration at toy scale, cost limits hold, < 10 s"):
        model = DiscreteReturns([[0.10, -0.05], [-0.04, 0.08]], [0.5, 0.5])
        target, cost, a = [0.5, 0.5], 0.005, 4.0
        start = time.perf_counter()
        res = dp_rebalance(DPConfig(target, grid=3, cost_rate=cost, risk_aversion=a,
                                    discount=1.0, horizon=3), model)
        assert time.perf_counter() - start < 10
        sig = model.covariance().tolist()

        def shortfall(w):
            d = [x - y for x, y in zip(w, target)]
            return 0.5 * a * sum(d[i] * sig[i][j] * d[j] for i in range(2) for j in range(2))

        policy, _ = oracles.exhaustive_policy([list(ax) for ax in res.grid.axes],
                                              res.action_targets.tolist(), model.outcomes.tolist(),
                                              model.probabilities.tolist(), cost, shortfall, 3)
        for s in np.flatnonzero(res.feasible):
            idx = tuple(int(i) for i in np.unravel_index(s, res.grid.shape))
            assert res.policy[s] == policy[idx]

        free = dp_rebalance(DPConfig(target, grid=5, cost_rate=0.0), model)
        assert np.allclose(free.post_trade()[free.feasible], target, atol=1e-15)
        dear = dp_rebalance(DPConfig(target, grid=5, cost_rate=1e6), model)
        assert np.all(dear.policy[dear.feasible] == -1)


TRUE = ImpactParams(alpha=0.8, beta=0.55, gamma=0.4, eta=0.12, delta=0.3)
STATS = {"A": MarketStats(1e6, 0.02, 5e7), "B": MarketStats(4e5, 0.015, 8e7),
         "C": MarketStats(2.5e6, 0.025, 1e8)}


def test_08_impact_round_trip():
    with criterion(8, "impact calibration on 10 000 orders, clean and 10% noise, < 60 s"):
        start = time.perf_counter()
        clean = calibrate_impact(simulate_orders(np.random.default_rng(81), 10_000, TRUE, STATS),
                                 STATS).params
        noisy = calibrate_impact(simulate_orders(np.random.default_rng(82), 10_000, TRUE, STATS,
                                                 relative_noise=0.1), STATS).params
        assert time.perf_counter() - start < 60
        assert abs(clean.alpha - TRUE.alpha) < 1e-4 and abs(clean.beta - TRUE.beta) < 1e-4
        assert abs(noisy.gamma - TRUE.gamma) < 0.1 * TRUE.gamma
        assert abs(noisy.eta - TRUE.eta) < 0.1 * TRUE.eta
        assert abs(noisy.alpha - TRUE.alpha) < 0.1 and abs(noisy.beta - TRUE.beta) < 0.1
        for x in (1e3, 5e4, 3e5):
            buy = Order("A", x, 0.5, 100.0)
            sell = Order("A", -x, 0.5, 100.0)
            pb, ps = predict_impact(buy, STATS["A"], TRUE), predict_impact(sell, STATS["A"], TRUE)
            assert ps[0] == -pb[0] and ps[1] == -pb[1]


def test_09_attribution_reconciliation():
    with criterion(9, "Brinson totals (1e-12) and currency components (1e-14) on 10 000 instances"):
        rng = np.random.default_rng(9)
        for _ in range(10_000):
            n = int(rng.integers(1, 12))
            seg = SegmentData(tuple(map(str, range(n))), rng.dirichlet(np.ones(n)),
                              rng.normal(0, 0.05, n), rng.dirichlet(np.ones(n)),
                              rng.normal(0, 0.05, n))
            r = brinson(seg)
            assert abs(sum(r.totals.values()) - r.active_return) <= 1e-12
        legs = CurrencyLeg(rng.uniform(-0.5, 0.5, 10_000), rng.uniform(-0.5, 0.5, 10_000),
                           rng.uniform(-0.05, 0.1, 10_000), rng.uniform(-0.05, 0.1, 10_000))
        d = currency_decomposition(legs)
        gap = d.local_excess + d.currency_excess + d.cross_product - (d.base_return - legs.base_risk_free)
        assert np.abs(gap).max() <= 1e-14


def test_10_estimator_recovery():
    with criterion(10, "single-index beta within 0.05 of 0.8; timing c within 3 SE on convex data"):
        rng = np.random.default_rng(10)
        m = rng.normal(0.0005, 0.01, 1000)
        _, b, _ = fit_single_index(0.001 + 0.8 * m + rng.normal(0, 0.01, 1000), m)
        assert abs(b - 0.8) < 0.05
        for c in (0.5, 2.0, 5.0):
            m = rng.normal(0.005, 0.05, 120)
            p = 0.001 + 0.8 * m + c * m ** 2 + rng.normal(0, 0.01, 120)
            t = timing_regression(PerformanceInput(p, m, 0.0))
            assert abs(t.c - c) < 3 * t.standard_errors[2]


def test_11_end_to_end_determinism(tmp_path):
    with criterion(11, "two same-seed fixture backtests are byte-identical, each < 30 s"):
        cfg = load_config(fixture_config_path())
        times = []
        for name in ("a", "b"):
            start = time.perf_counter()
            run_backtest(cfg, tmp_path / name)
            times.append(time.perf_counter() - start)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files == sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*")
                               if p.is_file())
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
        assert not mismatch and not errors
        assert max(times) < 30
