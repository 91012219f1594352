"""The bundled 5-asset synthetic fixture.

``build_fixture`` regenerates every file from a seed; the committed copy in
``quantcycle/fixtures`` is its output for ``FIXTURE_SEED``.
"""

from __future__ import annotations

import datetime as dt
import json
from importlib import resources
from pathlib import Path

import numpy as np

from .marketdata import (MarketSpec, fmt_float, load_prices, synthetic_market_with_factors,
                         write_factors, write_prices)
from .tca import ImpactParams, market_stats, simulate_orders, write_orders

FIXTURE_SEED = 2024
TRUE_IMPACT = ImpactParams(alpha=1.0, beta=0.6, gamma=0.3, eta=0.12, delta=0.25)

FIXTURE_SPEC = MarketSpec(
    n_assets=5,
    n_dates=400,
    drift=(0.0006, 0.0003, 0.0002, 0.0004, 0.0001),
    volatility=(0.011, 0.009, 0.013, 0.010, 0.008),
    n_factors=2,
    factor_volatility=(0.008, 0.005),
    loadings=((1.2, 0.3), (0.9, -0.4), (1.1, 0.8), (0.7, 0.1), (1.0, -0.6)),
    initial_price=(50.0, 120.0, 80.0, 30.0, 200.0),
    base_volume=(2.0e6, 8.0e5, 1.5e6, 3.0e6, 5.0e5),
    shares_outstanding=(6.0e8, 2.5e8, 4.0e8, 9.0e8, 1.5e8),
    start=dt.date(2021, 1, 4),
)

SEGMENTS = {"A00": "growth", "A01": "value", "A02": "growth", "A03": "value", "A04": "defensive"}

FIXTURE_CONFIG = {
    "data": {
        "prices": "prices.csv",
        "factors": "factors.csv",
        "orders": "orders.csv",
        "benchmark_prices": "benchmark_prices.csv",
        "fx": "fx.csv",
        "segments": "segments.csv",
        "currency": "currency.csv",
    },
    "seed": 7,
    "risk_free_rate": 0.0001,
    "estimation_window": 126,
    "holding_period": 21,
    "selection": {"quantile": 0.4, "confidence_mode": "ir", "ir_cap": 5.0},
    "black_litterman": {
        "risk_aversion": 2.5,
        "tau": 0.05,
        "long_only": True,
        "views": [{"type": "absolute", "long": ["A03"], "q": 0.004, "confidence": 0.3}],
    },
    "rebalance": {"policy": "band", "band": 0.02, "period": 21, "cost_rate": 0.0005,
                  "compare_paths": 400, "compare_horizon": 21},
    "impact": {"calibrate": True, "min_orders": 50},
    "tca": {"portfolio_value": 5.0e7, "duration_days": 0.5,
            "spreads": {"A00": 0.0004, "A01": 0.0003, "A02": 0.0005, "A03": 0.0004, "A04": 0.0002}},
    "attribution": {"segment_map": SEGMENTS},
}


def fixture_dir() -> Path:
    return Path(str(resources.files("quantcycle").joinpath("fixtures")))


def fixture_config_path() -> Path:
    return fixture_dir() / "config.json"


def build_fixture(directory, seed: int = FIXTURE_SEED) -> Path:
    """Write prices, factors, orders, benchmarks, FX, segments, currency and config."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    panel, factors = synthetic_market_with_factors(seed, FIXTURE_SPEC)
    write_prices(panel, out / "prices.csv")
    write_factors(factors, out / "factors.csv")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    # statistics of the panel as written, which is what calibration will see
    stats = market_stats(load_prices(out / "prices.csv"))
    orders = simulate_orders(rng, 200, TRUE_IMPACT, stats, participation_range=(0.01, 0.3),
                             relative_noise=0.05)
    write_orders(orders, out / "orders.csv")

    with (out / "benchmark_prices.csv").open("w") as fh:
        fh.write("order_id,vwap,open,close,prev_close,interval_vwap\n")
        for o in orders:
            z = 1.0 + 0.002 * rng.standard_normal(5)
            vals = [o.arrival_price * x for x in z]
            fh.write(o.order_id + "," + ",".join(fmt_float(v) for v in vals) + "\n")

    with (out / "fx.csv").open("w") as fh:
        fh.write("ts,pair,exec_price,market_price,day_high,day_low,side\n")
        fh.write("2021-06-01T10:00:00,EURUSD,1.2210,1.2205,1.2250,1.2150,buy\n")
        fh.write("2021-06-01T14:30:00,USDJPY,109.40,109.45,109.80,109.10,sell\n")
        fh.write("2021-06-02T09:15:00,GBPUSD,1.4150,1.4140,1.4190,1.4100,buy\n")

    with (out / "segments.csv").open("w") as fh:
        fh.write("period,segment,w_p,r_p,w_b,r_b\n")
        fh.write("2021Q1,growth,0.50,0.040,0.40,0.030\n")
        fh.write("2021Q1,value,0.30,0.010,0.40,0.015\n")
        fh.write("2021Q1,defensive,0.20,0.005,0.20,0.008\n")
        fh.write("2021Q2,growth,0.45,-0.020,0.40,-0.010\n")
        fh.write("2021Q2,value,0.35,0.020,0.40,0.018\n")
        fh.write("2021Q2,defensive,0.20,0.010,0.20,0.006\n")

    with (out / "currency.csv").open("w") as fh:
        fh.write("period,asset_id,local_return,currency_return,local_rf,base_rf\n")
        fh.write("2021Q1,A00,0.050,-0.020,0.001,0.002\n")
        fh.write("2021Q1,A01,0.012,0.015,0.003,0.002\n")
        fh.write("2021Q2,A00,-0.030,0.010,0.001,0.002\n")

    (out / "config.json").write_text(json.dumps(FIXTURE_CONFIG, indent=2) + "\n")
    return out / "config.json"


if __name__ == "__main__":
    import sys

    print(build_fixture(sys.argv[1] if len(sys.argv) > 1 else fixture_dir()))
