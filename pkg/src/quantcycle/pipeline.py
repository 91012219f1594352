"""Backtest pipeline: one function per stage, each reading earlier artifacts
from the output directory and writing its own.

Layout of ``out``::

    ingest/    returns, benchmark, benchmark weights, factors, cap weights, schedule
    fit/       factor fits, single-index fits, conditioned covariances
    rank/      rankings and factor weights
    views/     views per rebalance date and the IC history
    construct/ target weights and posterior detail
    impact/    impact parameters
    rebalance/ holdings, portfolio returns, orders, trades, policy comparison
    tca/       pre-trade metrics, realised costs, post-trade and FX slippage
    attribute/ risk-adjusted measures, Brinson, factor and currency attribution
    report.json, summary.csv, figures/*.png

Tabular artifacts are CSV with floats at 17 significant digits, so reading
them back reproduces every value exactly.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from . import __version__
from . import plotting
from .attribution import (PerformanceInput, SegmentData, brinson, currency_decomposition,
                          factor_attribution, load_currency, load_segments, risk_adjusted_measures,
                          timing_regression)
from .black_litterman import (EquilibriumInput, ViewSpec, assemble_views, black_litterman,
                              normalize_weights)
from .config import BacktestConfig, stage_seed
from .econometrics import condition_covariance, covariance
from .errors import QuantCycleError, ValidationError
from .factor_model import (FactorModelFit, IndexFit, blume_betas, fit_factor_model,
                           fit_index_model)
from .marketdata import (FactorPanel, PricePanel, ReturnPanel, cap_weighted_benchmark, cap_weights,
                         compute_returns, load_benchmark, load_factors, load_prices)
from .rebalancing import (BandPolicy, DPConfig, DPPolicy, LognormalReturns, PeriodicPolicy,
                          TriggerPolicy, compare_policies, dp_rebalance, drift_weights,
                          write_policy_comparison)
from .selection import (build_view_signals, composite_score, ic_series,
                        optimize_factor_weights, rank_assets, split_in_out_sample)
from .tca import (ImpactParams, Order, calibrate_impact, fx_slippage, load_benchmark_prices,
                  load_fx, load_orders, market_stats, participation, post_trade_report,
                  pre_trade_report, predict_impact, temporary_impact, write_orders)

log = logging.getLogger(__name__)

STAGES = ("ingest", "fit-factors", "rank", "views", "construct", "impact-calibrate",
          "rebalance", "tca", "attribute")
TRADE_EPS = 1e-12


class StageError(QuantCycleError):
    """A stage failed; ``cause`` is the underlying exception."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class RunContext:
    config: BacktestConfig
    out: Path

    def path(self, stage: str, name: str) -> Path:
        d = self.out / stage
        d.mkdir(parents=True, exist_ok=True)
        return d / name

    def existing(self, stage: str, name: str) -> Path:
        p = self.out / stage / name
        if not p.exists():
            raise ValidationError(f"missing artifact {p}; run the {stage!r} stage first")
        return p

    def figure(self, name: str) -> Path | None:
        if not self.config["report"]["figures"]:
            return None
        d = self.out / "figures"
        d.mkdir(parents=True, exist_ok=True)
        return d / name


# ---------------------------------------------------------------------------
# artifact I/O


def write_table(df: pd.DataFrame, path: Path) -> None:
    df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def read_table(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip", keep_default_na=False,
                       na_values=[""], dtype={"date": str, "asset": str})


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def read_json(path: Path):
    return json.loads(path.read_text())


def wide(dates, columns, values) -> pd.DataFrame:
    df = pd.DataFrame(np.asarray(values, dtype=float), columns=list(columns))
    df.insert(0, "date", [d.isoformat() for d in dates])
    return df


def unwide(df: pd.DataFrame) -> tuple[tuple[dt.date, ...], tuple[str, ...], np.ndarray]:
    dates = tuple(dt.date.fromisoformat(d) for d in df["date"])
    cols = tuple(c for c in df.columns if c != "date")
    return dates, cols, df[list(cols)].to_numpy(dtype=float)


def _date(text: str) -> dt.date:
    return dt.date.fromisoformat(text)


# ---------------------------------------------------------------------------
# shared inputs


def load_market(cfg: BacktestConfig) -> PricePanel:
    """Validated price panel restricted to the configured universe."""
    panel = load_prices(cfg.path("prices"))
    universe = cfg.settings.get("universe")
    if not universe:
        return panel
    missing = [a for a in universe if a not in panel.assets]
    if missing:
        raise ValidationError(f"universe assets not in the price file: {missing}")
    idx = [panel.assets.index(a) for a in universe]
    return PricePanel(panel.dates, tuple(universe), panel.close[:, idx], panel.volume[:, idx],
                      panel.shares_outstanding[idx])


@dataclass(frozen=True)
class Inputs:
    """The ingest artifacts, read back from disk."""

    returns: ReturnPanel
    benchmark_returns: np.ndarray
    risk_free: np.ndarray
    benchmark_weights: np.ndarray   # [T x N] weights applied over each return row
    factors: FactorPanel
    schedule: tuple[int, ...]       # return-row index where each holding period starts
    rebalance_dates: tuple[dt.date, ...]
    cap_weights: np.ndarray         # [D x N]

    def window(self, k: int, length: int) -> tuple[ReturnPanel, np.ndarray, FactorPanel]:
        lo = k - length
        f = FactorPanel(self.factors.dates[lo:k], self.factors.factors, self.factors.values[lo:k])
        return self.returns.slice(lo, k), self.benchmark_returns[lo:k], f


def read_inputs(ctx: RunContext) -> Inputs:
    dates, assets, r = unwide(read_table(ctx.existing("ingest", "returns.csv")))
    bench = read_table(ctx.existing("ingest", "benchmark.csv"))
    _, _, bw = unwide(read_table(ctx.existing("ingest", "benchmark_weights.csv")))
    fdates, fnames, fv = unwide(read_table(ctx.existing("ingest", "factors.csv")))
    sched = read_table(ctx.existing("ingest", "schedule.csv"))
    rdates, _, cw = unwide(read_table(ctx.existing("ingest", "cap_weights.csv")))
    return Inputs(ReturnPanel(dates, assets, r), bench["benchmark_return"].to_numpy(float),
                  bench["risk_free"].to_numpy(float), bw, FactorPanel(fdates, fnames, fv),
                  tuple(int(k) for k in sched["row"]), rdates, cw)


def _date_index(dates, target) -> int:
    """Index of the last date on or before ``target``."""
    ords = np.array([d.toordinal() for d in dates])
    i = int(np.searchsorted(ords, target.toordinal(), side="right")) - 1
    if i < 0:
        raise ValidationError(f"no entry on or before {target}")
    return i


# ---------------------------------------------------------------------------
# stages


def stage_ingest(ctx: RunContext) -> None:
    cfg = ctx.config
    prices = load_market(cfg)
    returns = compute_returns(prices)
    if cfg.path("benchmark") is not None:
        bench = load_benchmark(cfg.path("benchmark"), prices.assets)
    else:
        bench = cap_weighted_benchmark(prices)
    starts = prices.dates[:-1]
    bw = np.vstack([bench.weights_at(d) for d in starts])
    bench_r = np.einsum("ij,ij->i", bw, returns.returns)
    if cfg.path("factors") is not None:
        factors = load_factors(cfg.path("factors")).select(returns.dates)
    else:
        factors = FactorPanel(returns.dates, ("MKT",), bench_r[:, None])

    window, hold = cfg["estimation_window"], cfg["holding_period"]
    if window >= len(returns):
        raise ValidationError(f"estimation window {window} leaves no holding period in "
                              f"{len(returns)} return rows")
    schedule = list(range(window, len(returns), hold))
    reb_dates = [prices.dates[k] for k in schedule]
    caps = np.vstack([cap_weights(prices, d) for d in reb_dates])

    write_table(wide(returns.dates, returns.assets, returns.returns), ctx.path("ingest", "returns.csv"))
    write_table(pd.DataFrame({"date": [d.isoformat() for d in returns.dates],
                              "benchmark_return": bench_r,
                              "risk_free": np.full(len(returns), float(cfg["risk_free_rate"]))}),
                ctx.path("ingest", "benchmark.csv"))
    write_table(wide(returns.dates, returns.assets, bw), ctx.path("ingest", "benchmark_weights.csv"))
    write_table(wide(factors.dates, factors.factors, factors.values), ctx.path("ingest", "factors.csv"))
    write_table(pd.DataFrame({"date": [d.isoformat() for d in reb_dates], "row": schedule}),
                ctx.path("ingest", "schedule.csv"))
    write_table(wide(reb_dates, prices.assets, caps), ctx.path("ingest", "cap_weights.csv"))


def stage_fit_factors(ctx: RunContext) -> None:
    inp = read_inputs(ctx)
    length = ctx.config["estimation_window"]
    assets = inp.returns.assets
    fit_rows, index_rows, cov_frames = [], [], []
    for k, d in zip(inp.schedule, inp.rebalance_dates):
        rets, bench, factors = inp.window(k, length)
        fit = fit_factor_model(rets, factors)
        idx = fit_index_model(rets, bench)
        blume = blume_betas(rets, bench) if len(assets) >= 3 else idx.beta
        sigma = condition_covariance(covariance(rets.returns).matrix)
        for i, a in enumerate(assets):
            row = {"date": d.isoformat(), "asset": a, "intercept": fit.intercepts[i]}
            row.update({f"loading_{f}": fit.loadings[i, j] for j, f in enumerate(fit.factors)})
            row.update(specific_variance=fit.specific_variance[i], r_squared=fit.r_squared[i])
            fit_rows.append(row)
            index_rows.append({"date": d.isoformat(), "asset": a, "alpha": idx.alpha[i],
                               "beta": idx.beta[i], "blume_beta": blume[i],
                               "residual_variance": idx.residual_variance[i],
                               "market_variance": idx.market_variance})
        cov = pd.DataFrame(sigma, columns=list(assets))
        cov.insert(0, "asset", list(assets))
        cov.insert(0, "date", d.isoformat())
        cov_frames.append(cov)
    write_table(pd.DataFrame(fit_rows), ctx.path("fit", "factor_fits.csv"))
    write_table(pd.DataFrame(index_rows), ctx.path("fit", "index_fits.csv"))
    write_table(pd.concat(cov_frames, ignore_index=True), ctx.path("fit", "covariance.csv"))


def _by_date(df: pd.DataFrame) -> dict[str, pd.DataFrame]:
    return {d: g for d, g in df.groupby("date", sort=False)}


def read_loadings(ctx: RunContext) -> tuple[dict[str, pd.DataFrame], tuple[str, ...]]:
    fits = read_table(ctx.existing("fit", "factor_fits.csv"))
    factors = tuple(c[len("loading_"):] for c in fits.columns if c.startswith("loading_"))
    return _by_date(fits), factors


def read_covariances(ctx: RunContext) -> dict[str, np.ndarray]:
    cov = read_table(ctx.existing("fit", "covariance.csv"))
    assets = [c for c in cov.columns if c not in ("date", "asset")]
    return {d: g[assets].to_numpy(float) for d, g in _by_date(cov).items()}


def read_index_fits(ctx: RunContext) -> dict[str, tuple[IndexFit, dict[str, float]]]:
    df = read_table(ctx.existing("fit", "index_fits.csv"))
    out = {}
    for d, g in _by_date(df).items():
        fit = IndexFit(tuple(g["asset"]), g["alpha"].to_numpy(float), g["beta"].to_numpy(float),
                       g["residual_variance"].to_numpy(float), float(g["market_variance"].iloc[0]))
        out[d] = (fit, dict(zip(g["asset"], g["blume_beta"].astype(float))))
    return out


def stage_rank(ctx: RunContext) -> None:
    cfg = ctx.config
    sel = cfg["selection"]
    inp = read_inputs(ctx)
    fits, factors = read_loadings(ctx)
    assets = inp.returns.assets
    dates = inp.rebalance_dates
    exposures = {d: fits[d.isoformat()][[f"loading_{f}" for f in factors]].to_numpy(float)
                 for d in dates}
    in_sample: tuple[dt.date, ...] = ()
    mean_ic = None
    if sel["optimize_weights"]:
        in_sample, _ = split_in_out_sample(dates, sel["in_sample_fraction"])
        weights, mean_ic = optimize_factor_weights({d: exposures[d] for d in in_sample}, assets,
                                                   inp.returns, cfg["holding_period"],
                                                   sel["grid_step"])
    elif sel["factor_weights"] is not None:
        weights = np.asarray(sel["factor_weights"], dtype=float)
        if weights.shape != (len(factors),):
            raise ValidationError(f"selection/factor_weights has {len(weights)} entries for "
                                  f"{len(factors)} factors {list(factors)}")
    else:
        weights = np.full(len(factors), 1.0 / len(factors))
    rows = []
    for d in dates:
        ranking = rank_assets(d, assets, composite_score(exposures[d], weights))
        for pos, (a, s) in enumerate(zip(ranking.assets, ranking.scores), start=1):
            rows.append({"date": d.isoformat(), "asset": a, "score": s, "rank": pos})
    write_table(pd.DataFrame(rows), ctx.path("rank", "rankings.csv"))
    write_json({"factors": list(factors), "weights": weights.tolist(),
                "optimized": bool(sel["optimize_weights"]), "in_sample_mean_ic": mean_ic,
                "in_sample_dates": [d.isoformat() for d in in_sample]},
               ctx.path("rank", "factor_weights.json"))


def read_rankings(ctx: RunContext):
    from .selection import Ranking

    df = read_table(ctx.existing("rank", "rankings.csv"))
    return [Ranking(_date(d), tuple(g["asset"]), g["score"].to_numpy(float))
            for d, g in _by_date(df).items()]


VIEW_COLUMNS = ("date", "view_id", "source", "long", "short", "q", "confidence",
                "information_ratio", "hit_ratio")


def stage_views(ctx: RunContext) -> None:
    cfg = ctx.config
    sel = cfg["selection"]
    inp = read_inputs(ctx)
    rankings = read_rankings(ctx)
    meta = read_json(ctx.existing("rank", "factor_weights.json"))
    excluded = set(meta["in_sample_dates"])
    hold = cfg["holding_period"]
    universe = set(inp.returns.assets)
    rows = []
    for j, (k, d) in enumerate(zip(inp.schedule, inp.rebalance_dates)):
        history = [r for r in rankings[:j] if r.date.isoformat() not in excluded]
        n_view = 0
        if sel["auto_views"] and len(history) >= 2:
            sig = build_view_signals(history + [rankings[j]], inp.returns.slice(0, k), hold,
                                     sel["quantile"], sel["confidence_mode"], sel["ir_cap"],
                                     label="auto")[0]
            rows.append({"date": d.isoformat(), "view_id": n_view, "source": "auto",
                         "long": " ".join(sorted(sig.group_long)),
                         "short": " ".join(sorted(sig.group_short or ())),
                         "q": sig.expected_outperformance, "confidence": sig.confidence,
                         "information_ratio": sig.information_ratio, "hit_ratio": sig.hit_ratio})
            n_view += 1
        for v in cfg["black_litterman"]["views"]:
            short = v.get("short", []) if v["type"] == "relative" else []
            if v["type"] == "relative" and not short:
                raise ValidationError("black_litterman/views: a relative view needs a short group")
            unknown = [a for a in v["long"] + short if a not in universe]
            if unknown:
                raise ValidationError(f"black_litterman/views: unknown assets {unknown}")
            rows.append({"date": d.isoformat(), "view_id": n_view, "source": "static",
                         "long": " ".join(sorted(v["long"])), "short": " ".join(sorted(short)),
                         "q": float(v["q"]), "confidence": float(v["confidence"]),
                         "information_ratio": math.nan, "hit_ratio": math.nan})
            n_view += 1
    write_table(pd.DataFrame(rows, columns=list(VIEW_COLUMNS)), ctx.path("views", "views.csv"))
    ics = ic_series(rankings, inp.returns, hold)
    write_table(pd.DataFrame({"date": [d.isoformat() for d in ics.dates], "ic": ics.ic_values}),
                ctx.path("views", "ic.csv"))
    fig = ctx.figure("ic.png")
    if fig is not None:
        plotting.plot_ic(ics.dates, ics.ic_values, fig)


def read_views(ctx: RunContext) -> dict[str, list[ViewSpec]]:
    df = read_table(ctx.existing("views", "views.csv"))
    out: dict[str, list[ViewSpec]] = {}
    for _, row in df.iterrows():
        short = row["short"] if isinstance(row["short"], str) else ""
        out.setdefault(row["date"], []).append(ViewSpec(
            tuple(str(row["long"]).split()), tuple(short.split()), float(row["q"]),
            float(row["confidence"]), f"{row['source']}{row['view_id']}"))
    return out


def stage_construct(ctx: RunContext) -> None:
    cfg = ctx.config
    bl = cfg["black_litterman"]
    inp = read_inputs(ctx)
    covs = read_covariances(ctx)
    views = read_views(ctx)
    assets = inp.returns.assets
    weights, detail = [], []
    for j, d in enumerate(inp.rebalance_dates):
        key = d.isoformat()
        eq = EquilibriumInput(bl["risk_aversion"], covs[key], inp.cap_weights[j])
        vs = assemble_views(views.get(key, []), assets, eq.sigma, bl["tau"])
        post = black_litterman(vs, eq)
        w = normalize_weights(post.weights, bl["long_only"])
        weights.append(w)
        for i, a in enumerate(assets):
            detail.append({"date": key, "asset": a, "market_weight": inp.cap_weights[j, i],
                           "prior_return": post.prior_returns[i],
                           "posterior_return": post.combined_returns[i],
                           "raw_weight": post.weights[i], "weight": w[i]})
    write_table(wide(inp.rebalance_dates, assets, weights), ctx.path("construct", "weights.csv"))
    write_table(pd.DataFrame(detail), ctx.path("construct", "posterior.csv"))
    fig = ctx.figure("weights.png")
    if fig is not None:
        plotting.plot_weights(inp.rebalance_dates, assets, np.array(weights), fig)


def _config_params(cfg: BacktestConfig) -> ImpactParams:
    return ImpactParams(**cfg["impact"]["params"])


def stage_impact_calibrate(ctx: RunContext) -> None:
    cfg = ctx.config
    imp = cfg["impact"]
    record = {"source": "config", "params": _config_params(cfg).as_dict()}
    orders_path = cfg.path("orders")
    if imp["calibrate"] and orders_path is not None:
        prices = load_market(cfg)
        stats = market_stats(prices, window=cfg["adv_window"], spreads=cfg["tca"]["spreads"])
        orders = [o for o in load_orders(orders_path) if o.completed and o.asset in stats]
        res = calibrate_impact(orders, stats, imp["min_orders"])
        record = {"source": "calibrated", "params": res.params.as_dict(),
                  "rms_permanent": res.rms_permanent, "rms_temporary": res.rms_temporary,
                  "n_orders": res.n_orders, "converged": res.converged, "starts": res.starts}
        fig = ctx.figure("impact.png")
        if fig is not None:
            st = [stats[o.asset] for o in orders]
            x = np.array([float(participation(o.shares, s.adv, o.duration)) for o, s in zip(orders, st)])
            obs = np.array([temporary_impact(o) / (s.volatility * o.side)
                            for o, s in zip(orders, st)])
            plotting.plot_impact_fit(x, obs, res.params.eta * x ** res.params.beta, fig,
                                     title="Temporary impact / (sigma sgn X)")
    write_json(record, ctx.path("impact", "params.json"))


def read_impact(ctx: RunContext) -> ImpactParams:
    return ImpactParams(**read_json(ctx.existing("impact", "params.json"))["params"])


def _lognormal_model(window: np.ndarray) -> LognormalReturns:
    logs = np.log1p(window)
    vol = logs.std(axis=0, ddof=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.corrcoef(logs, rowvar=False)
    corr = np.where(np.isfinite(corr), corr, 0.0)
    np.fill_diagonal(corr, 1.0)
    return LognormalReturns(logs.mean(axis=0), vol, corr)


def _dp_policy(cfg: BacktestConfig, targets, model, seed: int) -> DPPolicy:
    reb = cfg["rebalance"]
    d = reb["dp"]
    return DPPolicy(dp_rebalance(DPConfig(
        targets, grid=d["grid"], cost_rate=reb["cost_rate"], risk_aversion=d["risk_aversion"],
        paths=d["paths"], convergence_tol=d["convergence_tol"], max_iterations=d["max_iterations"],
        discount=d["discount"], seed=seed), model))


def _policy(cfg: BacktestConfig, targets, sigma, model, seed, spreads):
    reb = cfg["rebalance"]
    name = reb["policy"]
    if name == "periodic":
        return PeriodicPolicy(targets, reb["period"]), None
    if name == "band":
        return BandPolicy(targets, reb["band"]), None
    if name == "trigger":
        return TriggerPolicy(targets, reb["risk_tolerance"], reb["cost_rate"] + 0.5 * spreads,
                             sigma), None
    policy = _dp_policy(cfg, targets, model, seed)
    return policy, policy.result


def stage_rebalance(ctx: RunContext) -> None:
    cfg = ctx.config
    reb, tca_cfg = cfg["rebalance"], cfg["tca"]
    inp = read_inputs(ctx)
    prices = load_market(cfg)
    _, _, targets_all = unwide(read_table(ctx.existing("construct", "weights.csv")))
    covs = read_covariances(ctx)
    params = read_impact(ctx)
    assets = inp.returns.assets
    n = len(assets)
    spreads = np.array([float(tca_cfg["spreads"].get(a, 0.0)) for a in assets])
    length = cfg["estimation_window"]
    starts = {k: j for j, k in enumerate(inp.schedule)}
    k0 = inp.schedule[0]

    value = float(tca_cfg["portfolio_value"])
    w = np.zeros(n)
    policy = None
    t = 0
    holdings, perf, orders, trades, dp_log = [], [], [], [], []
    for r in range(k0, len(inp.returns)):
        day = prices.dates[r]
        if r in starts:
            j = starts[r]
            sigma = covs[day.isoformat()]
            model = _lognormal_model(inp.returns.returns[r - length:r])
            policy, dp = _policy(cfg, targets_all[j], sigma, model,
                                 stage_seed(cfg.seed, "rebalance", j), spreads)
            if dp is not None:
                dp_log.append({"date": day.isoformat(), "iterations": dp.iterations,
                               "residual": dp.residual, "states": len(dp.states)})
            t = 0
        u = targets_all[0] - w if r == k0 else policy.decide_batch(t, w[None, :])[0]
        u = np.where(np.abs(u) > TRADE_EPS, u, 0.0)
        t += 1
        linear = spread_cost = impact_cost = 0.0
        if np.any(u):
            stats = market_stats(prices, window=cfg["adv_window"], end=r,
                                 spreads=tca_cfg["spreads"])
            for i in np.flatnonzero(u):
                a = assets[i]
                s0 = float(prices.close[r, i])
                order = Order(a, u[i] * value / s0, tca_cfg["duration_days"], s0,
                              order_id=f"R{r:05d}-{a}")
                perm, real = predict_impact(order, stats[a], params)
                executed = Order(a, order.shares, order.duration, s0, s0 * (1 + perm),
                                 s0 * (1 + real), order.order_id)
                orders.append(executed)
                lc = reb["cost_rate"] * abs(u[i])
                sc = 0.5 * spreads[i] * abs(u[i])
                ic = abs(u[i]) * order.side * real
                linear, spread_cost, impact_cost = linear + lc, spread_cost + sc, impact_cost + ic
                trades.append({"date": day.isoformat(), "order_id": order.order_id, "asset": a,
                               "weight_change": u[i], "notional": u[i] * value,
                               "linear_cost": lc, "spread_cost": sc, "impact_cost": ic})
        held = w + u
        gross = float(held @ inp.returns.returns[r])
        cost = linear + spread_cost + impact_cost
        net = gross - cost
        value *= 1.0 + net
        holdings.append(held)
        perf.append({"date": inp.returns.dates[r].isoformat(), "gross_return": gross,
                     "cost": cost, "portfolio_return": net,
                     "benchmark_return": inp.benchmark_returns[r], "risk_free": inp.risk_free[r],
                     "turnover": float(np.abs(u).sum()), "value": value})
        w = drift_weights(held, inp.returns.returns[r])

    write_table(wide(prices.dates[k0:len(inp.returns)], assets, holdings),
                ctx.path("rebalance", "holdings.csv"))
    write_table(pd.DataFrame(perf), ctx.path("rebalance", "portfolio.csv"))
    write_orders(orders, ctx.path("rebalance", "orders.csv"))
    write_table(pd.DataFrame(trades, columns=["date", "order_id", "asset", "weight_change",
                                              "notional", "linear_cost", "spread_cost",
                                              "impact_cost"]),
                ctx.path("rebalance", "trades.csv"))
    if dp_log:
        write_json(dp_log, ctx.path("rebalance", "dp.json"))

    # policy comparison on the first estimation window
    first = targets_all[0]
    model = _lognormal_model(inp.returns.returns[k0 - length:k0])
    sigma = covs[inp.rebalance_dates[0].isoformat()]
    candidates = [PeriodicPolicy(first, reb["period"]), BandPolicy(first, reb["band"]),
                  TriggerPolicy(first, reb["risk_tolerance"], reb["cost_rate"] + 0.5 * spreads,
                                sigma)]
    if np.all(first >= 0):
        candidates.append(_dp_policy(cfg, first, model, stage_seed(cfg.seed, "rebalance-compare-dp")))
    stats = compare_policies(candidates, reb["compare_paths"], reb["compare_horizon"], model,
                             reb["cost_rate"], first, risk_aversion=reb["dp"]["risk_aversion"],
                             seed=stage_seed(cfg.seed, "rebalance-compare"))
    write_policy_comparison(stats, ctx.path("rebalance", "policy_comparison.csv"))
    fig = ctx.figure("policies.png")
    if fig is not None:
        plotting.plot_policy_comparison([s.policy for s in stats], [s.mean_cost for s in stats], fig)


def read_orders(ctx: RunContext) -> list[Order]:
    return load_orders(ctx.existing("rebalance", "orders.csv"))


def stage_tca(ctx: RunContext) -> None:
    cfg = ctx.config
    inp = read_inputs(ctx)
    prices = load_market(cfg)
    params = read_impact(ctx)
    fits = read_index_fits(ctx)
    trades = read_table(ctx.existing("rebalance", "trades.csv"))
    orders = {o.order_id: o for o in read_orders(ctx)}
    fit_dates = inp.rebalance_dates

    order_rows, basket_rows = [], []
    for d, g in _by_date(trades).items():
        day = _date(d)
        r = prices.date_index(day)
        fit, blume = fits[fit_dates[_date_index(fit_dates, day)].isoformat()]
        basket = [orders[o] for o in g["order_id"]]
        stats = market_stats(prices, window=cfg["adv_window"], end=r, spreads=cfg["tca"]["spreads"])
        rep = pre_trade_report(basket, prices.slice(0, r + 1), fit, inp.benchmark_returns[:r],
                               params, stats, blume)
        for m in rep.orders:
            order_rows.append({"date": d, "order_id": m.order_id, "asset": m.asset,
                               "shares": m.shares, "notional": m.notional,
                               "participation": m.participation,
                               "permanent_impact": m.permanent_impact,
                               "realized_impact": m.realized_impact,
                               "expected_cost": m.expected_cost, "market_risk": m.market_risk,
                               "spread": m.spread, "beta": m.beta})
        basket_rows.append({"date": d, "orders": len(basket), "participation": rep.participation,
                            "expected_cost": rep.expected_cost, "market_risk": rep.market_risk,
                            "tracking_error": rep.tracking_error, "spread": rep.spread,
                            "beta": rep.beta, "duration": rep.duration})
    write_table(pd.DataFrame(order_rows), ctx.path("tca", "pre_trade_orders.csv"))
    write_table(pd.DataFrame(basket_rows), ctx.path("tca", "pre_trade_baskets.csv"))

    cost_cols = ["linear_cost", "spread_cost", "impact_cost"]
    costs = trades.groupby("date", sort=False).agg(
        turnover=("weight_change", lambda x: float(np.abs(x).sum())),
        **{c: (c, "sum") for c in cost_cols}).reset_index()
    costs["total_cost"] = costs[cost_cols].sum(axis=1)
    write_table(costs, ctx.path("tca", "costs.csv"))

    if cfg.path("orders") is not None and cfg.path("benchmark_prices") is not None:
        refs = load_benchmark_prices(cfg.path("benchmark_prices"))
        done = [o for o in load_orders(cfg.path("orders")) if o.completed and o.order_id in refs]
        common = sorted(set.intersection(*(set(refs[o.order_id]) for o in done))) if done else []
        marks = ("arrival", *common)
        post = post_trade_report(done, refs, marks)
        write_table(pd.DataFrame([{"order_id": o.order_id, "asset": o.asset,
                                   **{f"vs_{b}": post[o.order_id][b] for b in marks}}
                                  for o in done]),
                    ctx.path("tca", "post_trade.csv"))
    if cfg.path("fx") is not None:
        rows = []
        for rec in load_fx(cfg.path("fx")):
            vs_mkt, vs_mid = fx_slippage(rec["exec_price"], rec["market_price"], rec["day_high"],
                                         rec["day_low"], rec["side"])
            rows.append({"ts": rec["ts"], "pair": rec["pair"], "side": rec["side"],
                         "vs_market": vs_mkt, "vs_mid": vs_mid})
        write_table(pd.DataFrame(rows), ctx.path("tca", "fx.csv"))


def _segment_returns(w, r, members):
    """Segment weights and weight-averaged returns (NaN for an empty segment)."""
    sw = np.array([w[idx].sum() for idx in members])
    sr = np.array([w[idx] @ r[idx] / s if abs(s) > TRADE_EPS else np.nan
                   for idx, s in zip(members, sw)])
    return sw, sr


def _holdings_attribution(ctx: RunContext, inp: Inputs) -> dict:
    """Brinson and factor attribution of the simulated holdings, summed over periods."""
    cfg = ctx.config
    hdates, assets, held = unwide(read_table(ctx.existing("rebalance", "holdings.csv")))
    seg_map = cfg["attribution"]["segment_map"]
    seg_of = [seg_map.get(a, a) for a in assets]
    segments = tuple(dict.fromkeys(seg_of))
    members = [np.flatnonzero(np.array(seg_of) == s) for s in segments]
    k0 = inp.schedule[0]
    alloc = np.zeros(len(segments))
    select = np.zeros(len(segments))
    inter = np.zeros(len(segments))
    for t, w in enumerate(held):
        r = inp.returns.returns[k0 + t]
        wb, rb = _segment_returns(inp.benchmark_weights[k0 + t], r, members)
        wp, rp = _segment_returns(w, r, members)
        # an empty segment earns the other side's return, so it adds no selection effect
        rp = np.where(np.isnan(rp), rb, rp)
        rb = np.where(np.isnan(rb), rp, rb)
        res = brinson(SegmentData(segments, wp, rp, wb, rb), cfg["attribution"]["relative_allocation"])
        alloc += res.allocation
        select += res.selection
        inter += res.interaction

    fits, factors = read_loadings(ctx)
    length = cfg["estimation_window"]
    ends = list(inp.schedule[1:]) + [len(inp.returns)]
    contrib = np.zeros(len(factors))
    intercept = specific = 0.0
    for k, stop, d in zip(inp.schedule, ends, inp.rebalance_dates):
        g = fits[d.isoformat()]
        fm = FactorModelFit(assets, factors, g["intercept"].to_numpy(float),
                            g[[f"loading_{f}" for f in factors]].to_numpy(float),
                            g["specific_variance"].to_numpy(float),
                            covariance(inp.factors.values[k - length:k]), np.zeros((0, len(assets))),
                            g["r_squared"].to_numpy(float))
        for t in range(k, stop):
            fa = factor_attribution(fm, FactorPanel(inp.factors.dates[t:t + 1], factors,
                                                    inp.factors.values[t:t + 1]),
                                    held[t - k0], inp.returns.slice(t, t + 1))
            contrib += fa.contributions[0]
            intercept += fa.intercept
            specific += float(fa.specific[0])
    return {
        "brinson": pd.DataFrame({"segment": segments, "allocation": alloc, "selection": select,
                                 "interaction": inter}),
        "factor": pd.DataFrame({"component": [*factors, "intercept", "specific"],
                                "contribution": [*contrib, intercept, specific]}),
    }


def stage_attribute(ctx: RunContext) -> None:
    cfg = ctx.config
    external = cfg.path("performance")
    if external is not None:
        perf = read_table(external)
        missing = [c for c in ("date", "portfolio_return", "benchmark_return") if c not in perf]
        if missing:
            raise ValidationError(f"missing columns {missing}", path=str(external))
        if "risk_free" not in perf:
            perf["risk_free"] = float(cfg["risk_free_rate"])
        inp = None
    else:
        inp = read_inputs(ctx)
        perf = read_table(ctx.existing("rebalance", "portfolio.csv"))
    pi = PerformanceInput(perf["portfolio_return"].to_numpy(float),
                          perf["benchmark_return"].to_numpy(float), perf["risk_free"].to_numpy(float))
    measures = risk_adjusted_measures(pi).as_dict()
    timing = timing_regression(pi)
    result = {"risk_adjusted": measures,
              "timing": {"a": timing.a, "b": timing.b, "c": timing.c, "t_stat_c": timing.t_stat_c,
                         "standard_errors": list(timing.standard_errors),
                         "r_squared": timing.r_squared}}
    write_table(pd.DataFrame({"metric": list(measures), "value": [float(v) for v in measures.values()]}),
                ctx.path("attribute", "risk_adjusted.csv"))
    if inp is not None:
        parts = _holdings_attribution(ctx, inp)
        write_table(parts["brinson"], ctx.path("attribute", "brinson.csv"))
        write_table(parts["factor"], ctx.path("attribute", "factor.csv"))
        b = parts["brinson"]
        result["brinson_totals"] = {c: float(b[c].sum()) for c in ("allocation", "selection",
                                                                   "interaction")}
        result["gross_active_return"] = float(
            (perf["gross_return"] - perf["benchmark_return"]).sum())
        fig = ctx.figure("brinson.png")
        if fig is not None:
            plotting.plot_brinson(list(b["segment"]), b["allocation"], b["selection"],
                                  b["interaction"], fig)
    fig = ctx.figure("cumulative.png")
    if fig is not None:
        plotting.plot_cumulative(list(perf["date"]), pi.portfolio_returns, pi.benchmark_returns, fig)
    if cfg.path("segments") is not None:
        rows = []
        for period, seg in load_segments(cfg.path("segments")).items():
            res = brinson(seg, cfg["attribution"]["relative_allocation"])
            for s, a, sel, i in zip(res.segments, res.allocation, res.selection, res.interaction):
                rows.append({"period": period, "segment": s, "allocation": a, "selection": sel,
                             "interaction": i})
        write_table(pd.DataFrame(rows), ctx.path("attribute", "segments_brinson.csv"))
    if cfg.path("currency") is not None:
        rows = []
        for period, asset, leg in load_currency(cfg.path("currency")):
            c = currency_decomposition(leg)
            rows.append({"period": period, "asset": asset, "base_return": c.base_return,
                         "local_excess": c.local_excess, "currency_excess": c.currency_excess,
                         "cross_product": c.cross_product})
        write_table(pd.DataFrame(rows), ctx.path("attribute", "currency.csv"))
    write_json(result, ctx.path("attribute", "attribution.json"))
    write_report(ctx)


# ---------------------------------------------------------------------------
# report


def _records(path: Path) -> list[dict]:
    if not path.exists():
        return []
    df = read_table(path)
    return [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()}
            for row in df.to_dict(orient="records")]


def write_report(ctx: RunContext) -> None:
    """Nested JSON report plus a flat summary CSV, both assembled from stage artifacts."""
    cfg = ctx.config
    rebalances = []
    posterior = ctx.out / "construct" / "posterior.csv"
    if posterior.exists():
        views = _records(ctx.out / "views" / "views.csv")
        for d, g in _by_date(read_table(posterior)).items():
            rebalances.append({
                "date": d,
                "weights": dict(zip(g["asset"], g["weight"].astype(float))),
                "market_weights": dict(zip(g["asset"], g["market_weight"].astype(float))),
                "prior_returns": dict(zip(g["asset"], g["prior_return"].astype(float))),
                "posterior_returns": dict(zip(g["asset"], g["posterior_return"].astype(float))),
                "views": [v for v in views if v["date"] == d],
            })
    costs = _records(ctx.out / "tca" / "costs.csv")
    attribution = read_json(ctx.existing("attribute", "attribution.json"))
    totals = {k: float(sum(c[k] for c in costs))
              for k in ("linear_cost", "spread_cost", "impact_cost", "total_cost")} if costs else {}
    report = {
        "metadata": {"package_version": __version__, "seed": cfg.seed,
                     "config_hash": cfg.config_hash, "stages": list(STAGES)},
        "rebalances": rebalances,
        "tca": {"per_date": costs, "totals": totals},
        "attribution": attribution,
    }
    write_json(report, ctx.out / "report.json")

    summary = [("seed", float(cfg.seed))]
    summary += [(f"risk_adjusted.{k}", v) for k, v in attribution["risk_adjusted"].items()]
    summary += [(f"timing.{k}", attribution["timing"][k]) for k in ("a", "b", "c", "t_stat_c")]
    summary += [(f"brinson.{k}", v) for k, v in attribution.get("brinson_totals", {}).items()]
    summary += [(f"tca.{k}", v) for k, v in totals.items()]
    write_table(pd.DataFrame({"metric": [m for m, _ in summary],
                              "value": [np.nan if v is None else float(v) for _, v in summary]}),
                ctx.out / "summary.csv")


# ---------------------------------------------------------------------------
# driver


STAGE_FUNCTIONS: dict[str, Callable[[RunContext], None]] = {
    "ingest": stage_ingest,
    "fit-factors": stage_fit_factors,
    "rank": stage_rank,
    "views": stage_views,
    "construct": stage_construct,
    "impact-calibrate": stage_impact_calibrate,
    "rebalance": stage_rebalance,
    "tca": stage_tca,
    "attribute": stage_attribute,
}


def run_stage(name: str, config: BacktestConfig, out) -> None:
    if name not in STAGE_FUNCTIONS:
        raise ValidationError(f"unknown stage {name!r}; choose from {', '.join(STAGES)}")
    ctx = RunContext(config, Path(out))
    ctx.out.mkdir(parents=True, exist_ok=True)
    log.info("stage %s", name)
    try:
        STAGE_FUNCTIONS[name](ctx)
    except StageError:
        raise
    except (QuantCycleError, ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        raise StageError(name, exc) from exc


def run_backtest(config: BacktestConfig, out, stop_after: str | None = None) -> Path:
    """Run every stage in order (optionally stopping after ``stop_after``)."""
    if stop_after is not None and stop_after not in STAGES:
        raise ValidationError(f"unknown stage {stop_after!r}; choose from {', '.join(STAGES)}")
    for name in STAGES:
        run_stage(name, config, out)
        if name == stop_after:
            break
    return Path(out) / "report.json"

