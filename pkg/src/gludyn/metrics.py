"""Point-forecast accuracy metrics and the stratified evaluation harness.

Forecasts are scored at fixed horizons from a common set of anchor times,
overall and within clinically meaningful contexts (night, recent meal or
bolus, hypo-/hyperglycemia). MASE normalizes each model's error by the
last-observation-carried-forward error over the same anchors and horizon, so
the naive forecaster scores exactly 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import pandas as pd

from .data import GriddedSeries
from .errors import UndefinedMetricError

HYPO_MGDL = 70.0
HYPER_MGDL = 180.0
RECENT_MINUTES = 60.0
DEFAULT_HORIZONS = (6, 12, 18, 24, 36, 48, 72)   # steps of 5 min


def mae(pred, actual) -> float:
    pred, actual = np.asarray(pred, float), np.asarray(actual, float)
    ok = np.isfinite(pred) & np.isfinite(actual)
    if not ok.any():
        raise UndefinedMetricError("no finite forecast/actual pairs")
    return float(np.mean(np.abs(pred[ok] - actual[ok])))


def rmse(pred, actual) -> float:
    pred, actual = np.asarray(pred, float), np.asarray(actual, float)
    ok = np.isfinite(pred) & np.isfinite(actual)
    if not ok.any():
        raise UndefinedMetricError("no finite forecast/actual pairs")
    return float(np.sqrt(np.mean((pred[ok] - actual[ok]) ** 2)))


def naive_mae(y: np.ndarray, h: int) -> float:
    """Mean absolute h-step change of the series itself: the MASE
    denominator computed over every valid pair."""
    y = np.asarray(y, float)
    if h < 1 or h >= len(y):
        raise UndefinedMetricError(f"horizon {h} invalid for series of "
                                   f"length {len(y)}")
    a, b = y[h:], y[:-h]
    ok = np.isfinite(a) & np.isfinite(b)
    if not ok.any():
        raise UndefinedMetricError("no observed pairs for the horizon")
    denom = float(np.mean(np.abs(a[ok] - b[ok])))
    if denom == 0.0:
        raise UndefinedMetricError("series is h-step constant; MASE "
                                   "undefined")
    return denom


def mase(pred, actual, y_series: np.ndarray, h: int) -> float:
    return mae(pred, actual) / naive_mae(y_series, h)


def forecast_correlation(pred, actual) -> float:
    """Pearson correlation between forecasts and outcomes; NaN when either
    side is constant (correlation undefined)."""
    pred, actual = np.asarray(pred, float), np.asarray(actual, float)
    ok = np.isfinite(pred) & np.isfinite(actual)
    if ok.sum() < 2:
        return float("nan")
    p, a = pred[ok], actual[ok]
    if np.std(p) == 0.0 or np.std(a) == 0.0:
        return float("nan")
    return float(np.corrcoef(p, a)[0, 1])


# ---------------------------------------------------------------------------
# Context stratification
# ---------------------------------------------------------------------------

@dataclass
class ContextSpec:
    name: str
    mask_fn: Callable[[GriddedSeries], np.ndarray]   # (T,) bool at anchors

    def mask(self, series: GriddedSeries) -> np.ndarray:
        m = np.asarray(self.mask_fn(series), bool)
        if m.shape != (len(series),):
            raise ValueError(f"context {self.name!r} mask has wrong shape")
        return m


def _recent_event(values: np.ndarray, step_minutes: int,
                  window_minutes: float) -> np.ndarray:
    w = max(1, int(window_minutes / step_minutes))
    out = np.zeros(len(values), bool)
    hits = np.flatnonzero(values > 0)
    for t in hits:
        out[t:t + w] = True
    return out


def default_contexts() -> list[ContextSpec]:
    return [
        ContextSpec("anytime", lambda s: np.ones(len(s), bool)),
        ContextSpec("night", lambda s: s.tod_minutes() < 360.0),
        ContextSpec("recent_meal",
                    lambda s: _recent_event(s.carbs, s.step_minutes,
                                            RECENT_MINUTES)),
        ContextSpec("recent_bolus",
                    lambda s: _recent_event(s.bolus, s.step_minutes,
                                            RECENT_MINUTES)),
        ContextSpec("hypo", lambda s: np.nan_to_num(s.cgm, nan=np.inf)
                    < HYPO_MGDL),
        ContextSpec("hyper", lambda s: np.nan_to_num(s.cgm, nan=-np.inf)
                    > HYPER_MGDL),
    ]


# ---------------------------------------------------------------------------
# Evaluation harness
# ---------------------------------------------------------------------------

def select_anchors(series: GriddedSeries, max_horizon: int,
                   n_anchors: int | None = None, seed: int = 0,
                   warmup: int = 0) -> np.ndarray:
    """Anchor indices with an observation at the anchor and room for the
    longest horizon; optionally a random subsample."""
    T = len(series)
    valid = np.flatnonzero(series.observed[:T - max_horizon])
    valid = valid[valid >= warmup]
    if valid.size == 0:
        raise UndefinedMetricError("no valid anchors in the series")
    if n_anchors is not None and n_anchors < valid.size:
        rng = np.random.default_rng(seed)
        valid = np.sort(rng.choice(valid, size=n_anchors, replace=False))
    return valid


def forecast_table(forecaster, series: GriddedSeries, anchors: np.ndarray,
                   max_horizon: int) -> np.ndarray:
    """(n_anchors, max_horizon) point forecasts from ``point_path``."""
    out = np.full((len(anchors), max_horizon), np.nan)
    for i, t in enumerate(anchors):
        out[i] = forecaster.point_path(int(t), max_horizon)
    return out


def evaluate(forecasters: dict[str, object], series: GriddedSeries,
             horizons=DEFAULT_HORIZONS, contexts=None,
             n_anchors: int | None = None, seed: int = 0,
             warmup: int = 0, tables: dict | None = None) -> pd.DataFrame:
    """Score every forecaster at every horizon within every context.

    Returns one row per (model, horizon, context) with columns n, mae, rmse,
    mase, corr. Precomputed forecast tables may be passed in ``tables`` to
    skip recomputation.
    """
    horizons = tuple(int(h) for h in horizons)
    max_h = max(horizons)
    contexts = contexts if contexts is not None else default_contexts()
    anchors = select_anchors(series, max_h, n_anchors, seed, warmup)
    tables = dict(tables or {})
    for name, fc in forecasters.items():
        if name not in tables:
            tables[name] = forecast_table(fc, series, anchors, max_h)

    ctx_masks = {c.name: c.mask(series)[anchors] for c in contexts}
    rows = []
    for name in forecasters:
        table = tables[name]
        for h in horizons:
            target_idx = anchors + h
            actual = series.cgm[target_idx]
            scored = series.observed[target_idx]
            pred_h = table[:, h - 1]
            naive_h = series.cgm[anchors]       # anchor observation
            for cname, cmask in ctx_masks.items():
                sel = cmask & scored & np.isfinite(pred_h)
                n = int(sel.sum())
                if n == 0:
                    rows.append(dict(model=name, horizon_min=h * 5,
                                     context=cname, n=0, mae=np.nan,
                                     rmse=np.nan, mase=np.nan, corr=np.nan))
                    continue
                m = mae(pred_h[sel], actual[sel])
                denom_sel = cmask & scored & np.isfinite(naive_h)
                denom = (float(np.mean(np.abs(actual[denom_sel]
                                              - naive_h[denom_sel])))
                         if denom_sel.any() else np.nan)
                rows.append(dict(
                    model=name, horizon_min=h * 5, context=cname, n=n,
                    mae=m, rmse=rmse(pred_h[sel], actual[sel]),
                    mase=(m / denom if denom and denom > 0 else np.nan),
                    corr=forecast_correlation(pred_h[sel], actual[sel])))
    return pd.DataFrame(rows)


def write_metrics_csv(df: pd.DataFrame, path) -> None:
    df.to_csv(path, index=False, float_format="%.6g")
