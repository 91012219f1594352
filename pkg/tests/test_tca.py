import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from quantcycle.errors import DegenerateInputError, ValidationError
from quantcycle.factor_model import IndexFit
from quantcycle.marketdata import MarketSpec, compute_returns, synthetic_market
from quantcycle.tca import (BENCHMARKS, ImpactParams, MarketStats, Order, calibrate_impact,
                            fx_slippage, load_benchmark_prices, load_fx, load_orders,
                            market_stats, permanent_impact, post_trade_report, pre_trade_report,
                            predict_impact, realized_impact, simulate_orders, temporary_impact,
                            write_orders)

PARAMS = ImpactParams(alpha=1.0, beta=0.6, gamma=0.3, eta=0.1, delta=0.25)
STATS = MarketStats(adv=1e6, volatility=0.02, shares_outstanding=5e7)
MULTI = {"A": MarketStats(1e6, 0.02, 5e7), "B": MarketStats(4e5, 0.015, 8e7),
         "C": MarketStats(2.5e6, 0.025, 1e8)}


# -- measured impact -----------------------------------------------------------

def test_permanent_impact_examples():
    assert permanent_impact(Order("A", 10, 1, 100, post_price=100)) == 0
    assert permanent_impact(Order("A", 10, 1, 100, post_price=101)) == pytest.approx(0.01)
    assert permanent_impact(Order("A", 10, 1, 50, post_price=49)) == pytest.approx(-0.02)
    with pytest.raises(ValidationError):
        permanent_impact(Order("A", 10, 1, 100))


def test_realized_and_temporary_impact():
    assert realized_impact(Order("A", 10, 1, 100, avg_exec_price=100)) == 0
    o = Order("A", 10, 1, 100, post_price=101, avg_exec_price=100.5)
    assert realized_impact(o) == pytest.approx(0.005)
    assert temporary_impact(o) == pytest.approx(0.0, abs=1e-17)
    with pytest.raises(ValidationError):
        realized_impact(Order("A", 10, 1, 100, post_price=101))


def test_sell_mirror_negates_realized_impact():
    buy = Order("A", 1000, 1, 100, post_price=100.8, avg_exec_price=100.5)
    sell = Order("A", -1000, 1, 100, post_price=99.2, avg_exec_price=99.5)
    assert realized_impact(sell) == pytest.approx(-realized_impact(buy), abs=1e-15)


def test_order_validation():
    with pytest.raises(ValidationError):
        Order("A", 10, 0.0, 100)
    with pytest.raises(ValidationError):
        Order("A", 10, 1.0, -1)


# -- prediction ----------------------------------------------------------------

def test_zero_shares_zero_impact():
    assert predict_impact(Order("A", 0, 0.5, 100), STATS, PARAMS) == (0.0, 0.0)


def test_scalar_plug_in_oracle():
    # participation 50 000 / (1e6 * 0.5) = 0.1, theta / V = 50
    i_hat, j_hat = predict_impact(Order("A", 50_000, 0.5, 100), STATS, PARAMS)
    expected_i = 0.02 * 0.3 * 0.5 * 0.1 ** 1.0 * 50 ** 0.25
    expected_j = expected_i / 2 + 0.02 * 0.1 * 0.1 ** 0.6
    assert i_hat == pytest.approx(expected_i, rel=1e-14)
    assert j_hat == pytest.approx(expected_j, rel=1e-14)
    assert i_hat == pytest.approx(7.9774e-4, rel=1e-4)


@given(st.floats(1, 1e7), st.floats(0.01, 2), st.floats(0.001, 0.1),
       st.floats(0.1, 2), st.floats(0.1, 2), st.floats(0, 1))
def test_prediction_is_odd_in_shares(x, t, sigma, a, b, d):
    p = ImpactParams(a, b, 0.3, 0.1, d)
    s = MarketStats(1e6, sigma, 5e7)
    buy = predict_impact(Order("A", x, t, 100), s, p)
    sell = predict_impact(Order("A", -x, t, 100), s, p)
    assert sell == (-buy[0], -buy[1])


@given(st.floats(1, 1e6), st.floats(1, 1e6), st.floats(0.001, 0.05), st.floats(0.001, 0.05))
def test_permanent_impact_monotone_in_size_and_vol(x1, x2, s1, s2):
    (xa, xb), (sa, sb) = sorted((x1, x2)), sorted((s1, s2))
    i = lambda x, s: abs(predict_impact(Order("A", x, 0.5, 100), MarketStats(1e6, s, 5e7), PARAMS)[0])
    assert i(xa, sa) <= i(xb, sa)
    assert i(xa, sa) <= i(xa, sb)


def test_invalid_params():
    with pytest.raises(ValidationError):
        ImpactParams(0.0, 0.5, 0.1, 0.1, 0.1)
    with pytest.raises(ValidationError):
        ImpactParams(1.0, 0.5, math.nan, 0.1, 0.1)


# -- calibration ---------------------------------------------------------------

TRUE = ImpactParams(alpha=0.8, beta=0.55, gamma=0.4, eta=0.12, delta=0.3)


def test_noiseless_calibration_recovers_parameters():
    orders = simulate_orders(np.random.default_rng(1), 600, TRUE, MULTI)
    res = calibrate_impact(orders, MULTI).params
    for name in ("alpha", "beta", "delta"):
        assert abs(getattr(res, name) - getattr(TRUE, name)) < 1e-4
    for name in ("gamma", "eta"):
        assert getattr(res, name) == pytest.approx(getattr(TRUE, name), rel=1e-4)


def test_noisy_calibration_and_residual_scale():
    orders = simulate_orders(np.random.default_rng(2), 2000, TRUE, MULTI, relative_noise=0.1)
    res = calibrate_impact(orders, MULTI)
    p = res.params
    assert abs(p.alpha - TRUE.alpha) < 0.1 and abs(p.beta - TRUE.beta) < 0.1
    assert p.gamma == pytest.approx(TRUE.gamma, rel=0.1)
    assert p.eta == pytest.approx(TRUE.eta, rel=0.1)
    clean = [Order(o.asset, o.shares, o.duration, o.arrival_price) for o in orders]
    perm = np.array([predict_impact(o, MULTI[o.asset], TRUE)[0] for o in clean])
    real = np.array([predict_impact(o, MULTI[o.asset], TRUE)[1] for o in clean])
    noise_i = 0.1 * np.sqrt(np.mean(perm ** 2))
    noise_t = 0.1 * np.sqrt(np.mean((real - perm / 2) ** 2))
    assert res.rms_permanent <= 1.2 * noise_i
    assert res.rms_temporary <= 1.2 * noise_t


def test_calibration_is_deterministic():
    orders = simulate_orders(np.random.default_rng(3), 200, TRUE, MULTI, relative_noise=0.05)
    assert calibrate_impact(orders, MULTI) == calibrate_impact(orders, MULTI)


def test_identical_participation_is_degenerate():
    orders = [Order("A", 1e5, 0.5, 100, 100.1, 100.05, f"o{i}") for i in range(60)]
    with pytest.raises(DegenerateInputError):
        calibrate_impact(orders, MULTI)


def test_calibration_needs_enough_orders():
    orders = simulate_orders(np.random.default_rng(4), 10, TRUE, MULTI)
    with pytest.raises(ValidationError):
        calibrate_impact(orders, MULTI)


# -- pre-trade -----------------------------------------------------------------

def pre_trade_inputs():
    panel = synthetic_market(8, MarketSpec(n_assets=3, n_dates=60, asset_prefix="A"))
    rets = compute_returns(panel)
    bench = rets.returns.mean(axis=1)
    fit = IndexFit(panel.assets, [0.0] * 3, [0.8, 1.1, 1.4], [1e-4, 2e-4, 3e-4], 1e-4)
    return panel, fit, bench


def test_zero_share_order_costs_nothing():
    panel, fit, bench = pre_trade_inputs()
    rep = pre_trade_report([Order("A00", 0.0, 0.5, 100)], panel, fit, bench, PARAMS)
    assert rep.expected_cost == 0 and rep.participation == 0 and rep.market_risk == 0
    assert rep.orders[0].permanent_impact == 0


def test_two_identical_orders_match_single_order():
    panel, fit, bench = pre_trade_inputs()
    o = Order("A01", 20_000, 0.5, 50)
    one = pre_trade_report([o], panel, fit, bench, PARAMS)
    two = pre_trade_report([o, o], panel, fit, bench, PARAMS)
    assert two.weights.tolist() == [0.5, 0.5]
    for name in ("participation", "expected_cost", "market_risk", "tracking_error", "spread",
                 "beta", "duration"):
        assert getattr(two, name) == pytest.approx(getattr(one, name), rel=1e-12, abs=1e-18)


def test_basket_weighted_beta_by_hand():
    panel, fit, bench = pre_trade_inputs()
    orders = [Order("A00", 10_000, 0.5, 40), Order("A01", -5_000, 0.5, 100),
              Order("A02", 20_000, 0.5, 25)]
    rep = pre_trade_report(orders, panel, fit, bench, PARAMS,
                           adjusted_betas={"A02": 1.2})
    notional = [400_000, -500_000, 500_000]
    gross = 1_400_000
    expected = (400_000 * 0.8 - 500_000 * 1.1 + 500_000 * 1.2) / gross
    assert rep.beta == pytest.approx(expected, rel=1e-14)
    assert rep.weights == pytest.approx([n / gross for n in notional])


def test_pre_trade_missing_inputs_listed():
    panel, fit, bench = pre_trade_inputs()
    with pytest.raises(ValidationError, match="ZZZ"):
        pre_trade_report([Order("ZZZ", 1, 0.5, 10)], panel, fit, bench, PARAMS)


def test_market_stats_window():
    panel = synthetic_market(9, MarketSpec(n_assets=2, n_dates=40))
    st_ = market_stats(panel, window=10)
    r = compute_returns(panel.slice(29, 40)).returns
    assert st_["A00"].volatility == pytest.approx(r[:, 0].std(ddof=1))
    assert st_["A00"].adv == pytest.approx(panel.volume[30:40, 0].mean())


# -- post-trade and FX ---------------------------------------------------------

def test_post_trade_examples():
    flat = Order("A", 100, 1, 100, 100, 100, "o1")
    out = post_trade_report([flat], {"o1": {b: 100.0 for b in BENCHMARKS}})
    assert all(v == 0 for v in out["o1"].values())
    buy = Order("A", 100, 1, 100, 101, 101, "b")
    assert post_trade_report([buy], {}, ["arrival"])["b"]["arrival"] == pytest.approx(0.01)
    sell = Order("A", -100, 1, 100, 99, 99, "s")
    assert post_trade_report([sell], {"s": {"close": 100.0}}, ["close"])["s"]["close"] == pytest.approx(0.01)


def test_post_trade_missing_benchmark():
    o = Order("A", 100, 1, 100, 101, 101, "b")
    with pytest.raises(ValidationError, match="vwap"):
        post_trade_report([o], {}, ["vwap"])


@given(st.floats(-1e6, 1e6).filter(lambda x: x != 0), st.floats(50, 150), st.floats(50, 150))
def test_arrival_slippage_equals_signed_realized_impact(x, s0, avg):
    o = Order("A", x, 1, s0, s0, avg, "o")
    assert post_trade_report([o], {}, ["arrival"])["o"]["arrival"] == np.sign(x) * realized_impact(o)


def test_fx_examples():
    assert fx_slippage(1.1, 1.1, 1.12, 1.08) == (0.0, 0.0)
    vs_mkt, vs_mid = fx_slippage(1.105, 1.100, 1.12, 1.08)
    assert vs_mkt == pytest.approx(0.005 / 1.1, rel=1e-12)
    assert vs_mid == pytest.approx(0.005 / 1.1, rel=1e-12)
    assert f"{vs_mkt:.6f}" == "0.004545"
    assert fx_slippage(1.105, 1.100, 1.12, 1.08, side=-1) == (-vs_mkt, -vs_mid)
    with pytest.raises(ValidationError):
        fx_slippage(1.1, 1.1, 1.0, 1.2)


# -- files ---------------------------------------------------------------------

def test_orders_round_trip(tmp_path):
    orders = simulate_orders(np.random.default_rng(5), 5, TRUE, MULTI)
    path = tmp_path / "o.csv"
    write_orders(orders, path)
    assert load_orders(path) == orders


def test_load_orders_errors(tmp_path):
    p = tmp_path / "o.csv"
    p.write_text("order_id,asset_id,shares\n")
    with pytest.raises(ValidationError, match="missing columns"):
        load_orders(p)
    p.write_text("order_id,asset_id,shares,duration_days,arrival_price,avg_exec_price,post_price\n"
                 "x,A,10,0.5,-3,,\n")
    with pytest.raises(ValidationError) as exc:
        load_orders(p)
    assert exc.value.row == 2


def test_benchmark_prices_and_fx_files(tmp_path):
    b = tmp_path / "b.csv"
    b.write_text("order_id,vwap,open,close,prev_close,interval_vwap\no1,100,99,,98,100.5\n")
    assert load_benchmark_prices(b) == {"o1": {"vwap": 100, "open": 99, "prev_close": 98,
                                               "interval_vwap": 100.5}}
    f = tmp_path / "f.csv"
    f.write_text("ts,pair,exec_price,market_price,day_high,day_low\nt,EURUSD,1.1,1.1,1.2,1.0\n")
    assert load_fx(f)[0]["side"] == 1.0
