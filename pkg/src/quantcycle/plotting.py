"""Report figures. Every function writes one PNG and returns its path."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

REPORT_STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}

# no timestamps in the PNG metadata so reruns produce identical files
_PNG_METADATA = {"Software": None}


def figsize(width: float = 6.5, aspect: float | None = None) -> tuple[float, float]:
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    return width, width * (aspect or golden)


def new_figure(width: float = 6.5, aspect: float | None = None, nrows: int = 1, ncols: int = 1):
    with plt.rc_context(REPORT_STYLE):
        fig, ax = plt.subplots(nrows, ncols, figsize=figsize(width, aspect))
    return fig, ax


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(REPORT_STYLE):
        fig.savefig(path, format="png", metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def plot_weights(dates: Sequence, assets: Sequence[str], weights, path, title="Target weights"):
    """Stacked area of weights over rebalance dates."""
    w = np.asarray(weights, dtype=float)
    fig, ax = new_figure()
    x = np.arange(len(dates))
    pos = np.clip(w, 0, None)
    ax.stackplot(x, pos.T, labels=list(assets), alpha=0.85)
    if np.any(w < 0):
        ax.stackplot(x, np.clip(w, None, 0).T, alpha=0.5)
    _date_ticks(ax, dates)
    ax.set_ylabel("weight")
    ax.set_title(title)
    ax.legend(loc="upper left", ncol=min(len(assets), 5), frameon=False)
    return save(fig, path)


def plot_cumulative(dates: Sequence, portfolio, benchmark, path, title="Cumulative return"):
    fig, ax = new_figure()
    x = np.arange(len(dates))
    ax.plot(x, np.cumprod(1 + np.asarray(portfolio)) - 1, label="portfolio", lw=1.2)
    ax.plot(x, np.cumprod(1 + np.asarray(benchmark)) - 1, label="benchmark", lw=1.0, ls="--")
    _date_ticks(ax, dates)
    ax.set_ylabel("cumulative return")
    ax.set_title(title)
    ax.legend(frameon=False)
    return save(fig, path)


def plot_ic(dates: Sequence, ic_values, path, title="Information coefficient"):
    fig, ax = new_figure(aspect=0.45)
    v = np.asarray(ic_values, dtype=float)
    x = np.arange(len(v))
    ax.bar(x, v, color=np.where(v > 0, "tab:green", "tab:red"), width=0.8)
    if len(v):
        ax.axhline(v.mean(), color="k", lw=0.8, ls="--", label=f"mean {v.mean():.3f}")
        ax.legend(frameon=False)
    _date_ticks(ax, dates)
    ax.set_ylim(-1, 1)
    ax.set_title(title)
    return save(fig, path)


def plot_brinson(segments: Sequence[str], allocation, selection, interaction, path,
                 title="Active return attribution"):
    fig, ax = new_figure()
    x = np.arange(len(segments))
    width = 0.27
    ax.bar(x - width, allocation, width, label="allocation")
    ax.bar(x, selection, width, label="selection")
    ax.bar(x + width, interaction, width, label="interaction")
    ax.axhline(0, color="k", lw=0.6)
    ax.set_xticks(x, list(segments), rotation=45, ha="right")
    ax.set_title(title)
    ax.legend(frameon=False)
    return save(fig, path)


def plot_policy_comparison(names: Sequence[str], mean_costs, path, title="Rebalancing policies"):
    fig, ax = new_figure(aspect=0.45)
    ax.barh(list(names), mean_costs, color="tab:blue")
    ax.set_xlabel("mean total cost per path")
    ax.set_title(title)
    return save(fig, path)


def plot_impact_fit(participation, observed, predicted, path, title="Impact calibration"):
    fig, ax = new_figure()
    order = np.argsort(participation)
    ax.scatter(participation, observed, s=4, alpha=0.4, label="observed")
    ax.plot(np.asarray(participation)[order], np.asarray(predicted)[order], color="k", lw=1,
            label="model")
    ax.set_xscale("log")
    ax.set_xlabel("participation |X|/(VT)")
    ax.set_ylabel("signed impact")
    ax.set_title(title)
    ax.legend(frameon=False)
    return save(fig, path)


def _date_ticks(ax, dates, max_ticks: int = 6):
    n = len(dates)
    if n == 0:
        return
    step = max(1, n // max_ticks)
    idx = list(range(0, n, step))
    ax.set_xticks(idx, [str(dates[i]) for i in idx], rotation=30, ha="right")
