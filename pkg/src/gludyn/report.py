"""Figure rendering for forecasts, evaluation summaries, and counterfactuals.

All functions save PNG files (headless Agg backend) and return the path, so
the CLI can place figures next to the delimited output they illustrate.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .data import GriddedSeries, STEP_MINUTES  # noqa: E402
from .forecast import ForecastResult  # noqa: E402

HYPO_LINE = 70.0
HYPER_LINE = 180.0
DPI = 130


def _glucose_axes(ax, ylabel="glucose (mg/dL)"):
    ax.axhline(HYPO_LINE, color="tab:red", lw=0.7, ls=":", alpha=0.6)
    ax.axhline(HYPER_LINE, color="tab:orange", lw=0.7, ls=":", alpha=0.6)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.25)


def forecast_band_figure(path, result: ForecastResult,
                         series: GriddedSeries | None = None,
                         anchor: int | None = None,
                         history_steps: int = 72,
                         title: str = "Forecast") -> str:
    """Point forecast with its 95% band, preceded by recent history."""
    fig, ax = plt.subplots(figsize=(9, 4))
    h = len(result.mean)
    t_f = STEP_MINUTES * np.arange(1, h + 1)
    if series is not None and anchor is not None:
        lo = max(0, anchor + 1 - history_steps)
        t_h = STEP_MINUTES * (np.arange(lo, anchor + 1) - anchor)
        ax.plot(t_h, series.cgm[lo:anchor + 1], color="k", lw=1.2,
                label="observed")
        future_hi = min(len(series), anchor + 1 + h)
        if future_hi > anchor + 1:
            t_a = STEP_MINUTES * (np.arange(anchor + 1, future_hi) - anchor)
            ax.plot(t_a, series.cgm[anchor + 1:future_hi], color="k", lw=0.8,
                    ls="--", alpha=0.6, label="outcome")
    ax.fill_between(t_f, result.lo95, result.hi95, color="tab:blue",
                    alpha=0.25, label="95% band")
    ax.plot(t_f, result.mean, color="tab:blue", lw=1.6, label="forecast")
    ax.axvline(0, color="grey", lw=0.8)
    _glucose_axes(ax)
    ax.set_xlabel("minutes from anchor")
    ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)


def mae_by_horizon_figure(path, df: pd.DataFrame,
                          metric: str = "mae") -> str:
    """One panel per context; per-model metric curves over the horizon."""
    contexts = list(dict.fromkeys(df["context"]))
    models = list(dict.fromkeys(df["model"]))
    ncols = min(3, len(contexts))
    nrows = int(np.ceil(len(contexts) / ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(4.2 * ncols, 3.2 * nrows),
                             squeeze=False, sharex=True)
    for i, ctx in enumerate(contexts):
        ax = axes[i // ncols][i % ncols]
        sub = df[df["context"] == ctx]
        for model in models:
            ms = sub[sub["model"] == model].sort_values("horizon_min")
            ax.plot(ms["horizon_min"], ms[metric], marker="o", ms=3,
                    label=model)
        ax.set_title(ctx, fontsize=10)
        ax.grid(True, alpha=0.25)
        if i % ncols == 0:
            ax.set_ylabel(f"{metric} (mg/dL)" if metric in ("mae", "rmse")
                          else metric)
        if i // ncols == nrows - 1:
            ax.set_xlabel("horizon (min)")
    for j in range(len(contexts), nrows * ncols):
        axes[j // ncols][j % ncols].axis("off")
    axes[0][0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)


def counterfactual_figure(path, results: dict[str, ForecastResult],
                          title: str = "Counterfactual forecasts") -> str:
    """Grid of scenario forecasts with bands, shared axes."""
    names = list(results)
    ncols = 2 if len(names) > 1 else 1
    nrows = int(np.ceil(len(names) / ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(5.0 * ncols, 3.2 * nrows),
                             squeeze=False, sharex=True, sharey=True)
    for i, name in enumerate(names):
        ax = axes[i // ncols][i % ncols]
        r = results[name]
        t = STEP_MINUTES * np.arange(1, len(r.mean) + 1)
        ax.fill_between(t, r.lo95, r.hi95, color="tab:blue", alpha=0.25)
        ax.plot(t, r.mean, color="tab:blue", lw=1.5)
        ax.set_title(name, fontsize=10)
        _glucose_axes(ax, ylabel="mg/dL" if i % ncols == 0 else "")
        if i // ncols == nrows - 1:
            ax.set_xlabel("minutes from anchor")
    for j in range(len(names), nrows * ncols):
        axes[j // ncols][j % ncols].axis("off")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)


def loss_trace_figure(path, loss_trace: np.ndarray,
                      title: str = "Training objective") -> str:
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.plot(np.asarray(loss_trace), lw=0.9)
    ax.set_xlabel("iteration")
    ax.set_ylabel("negative ELBO")
    ax.set_title(title)
    ax.grid(True, alpha=0.25)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)


def series_overview_figure(path, series: GriddedSeries,
                           title: str = "Series overview") -> str:
    """CGM trace with insulin and carb events underneath."""
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(10, 5), sharex=True,
                                   height_ratios=[2, 1])
    t_days = np.arange(len(series)) * STEP_MINUTES / 1440.0
    ax1.plot(t_days, series.cgm, lw=0.7, color="k")
    _glucose_axes(ax1, "CGM (mg/dL)")
    ax1.set_title(title)
    ax2.bar(t_days, series.carbs, width=0.01, color="tab:green",
            label="carbs (g)")
    ax2.plot(t_days, series.insulin * 12, lw=0.6, color="tab:purple",
             label="insulin (U/h)")
    ax2.set_xlabel("days")
    ax2.legend(fontsize=8)
    ax2.grid(True, alpha=0.25)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)
