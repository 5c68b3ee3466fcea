"""Reference forecasters: ARMA, last-observation carry-forward, and a
static-parameter simulator refit on a trailing window.

Every baseline exposes ``point_path(anchor, h)`` returning an (h,) mg/dL
point forecast from the given grid index, matching the evaluation contract
of the main model's cached forecaster.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from . import physio
from .data import GriddedSeries
from .errors import FitError, ForecastError
from .inference import adam_init, adam_step

WINDOW_MINUTES = 360  # trailing window for the static simulator refit


# ---------------------------------------------------------------------------
# ARMA(p, q) by conditional sum of squares
# ---------------------------------------------------------------------------

def _css_residuals(y_centered, phi, theta):
    """Conditional-sum-of-squares residual recursion (jax-traceable)."""
    p, q = phi.shape[0], theta.shape[0]
    k = max(p, q, 1)
    y_lag0 = jnp.concatenate([jnp.zeros(k), y_centered])

    def body(carry, t):
        e_hist = carry
        ar = jnp.sum(phi * jax.lax.dynamic_slice(y_lag0, (t + k - p,), (max(p, 1),))[::-1][:p]) if p else 0.0
        ma = jnp.sum(theta * e_hist[:q]) if q else 0.0
        e = y_lag0[t + k] - ar - ma
        e_hist = jnp.concatenate([jnp.array([e]), e_hist[:-1]]) if q else e_hist
        return e_hist, e

    e0 = jnp.zeros(max(q, 1))
    _, resid = jax.lax.scan(body, e0, jnp.arange(y_centered.shape[0]))
    return resid


def reflect_roots(coefs: np.ndarray) -> np.ndarray:
    """Map lag-polynomial coefficients to ones whose roots lie outside the
    unit circle, reflecting offending roots r -> 1/conj(r).

    ``coefs`` are the (phi_1..phi_p) of 1 - phi_1 L - ... - phi_p L^p (same
    convention for the MA side with signs flipped internally).
    """
    coefs = np.asarray(coefs, float)
    if coefs.size == 0 or np.allclose(coefs, 0):
        return coefs.copy()
    poly = np.concatenate([[1.0], -coefs])           # in powers of L
    roots = np.roots(poly[::-1])                      # roots of the L-poly
    bad = np.abs(roots) < 1.0
    if not np.any(bad):
        return coefs.copy()
    roots = np.where(np.abs(roots) > 1e-10, roots, 1e-10)
    roots[bad] = 1.0 / np.conj(roots[bad])
    new = np.poly(1.0 / roots)                        # monic in z = 1/L
    new = np.real(new / new[0])
    return -new[1:]


@dataclass
class ArmaModel:
    p: int
    q: int
    mu: float
    phi: np.ndarray
    theta: np.ndarray
    sigma2: float
    loss_trace: np.ndarray = field(default=None, repr=False)

    def residuals(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(_css_residuals(jnp.asarray(y - self.mu),
                                         jnp.asarray(self.phi),
                                         jnp.asarray(self.theta)))

    def forecast(self, y_hist: np.ndarray, h: int) -> np.ndarray:
        """h-step recursion: known residuals over the history, zero beyond."""
        y_hist = np.asarray(y_hist, float)
        if not np.all(np.isfinite(y_hist)):
            raise ForecastError("ARMA history must be finite (interpolate "
                                "gaps first)")
        e = self.residuals(y_hist)
        yc = list(y_hist - self.mu)
        el = list(e)
        out = np.empty(h)
        for i in range(h):
            ar = sum(self.phi[j] * yc[-1 - j] for j in range(self.p)
                     if len(yc) > j)
            ma = sum(self.theta[j] * el[-1 - j] for j in range(self.q)
                     if len(el) > j)
            val = ar + ma
            yc.append(val)
            el.append(0.0)
            out[i] = val + self.mu
        return out


def arma_fit(y: np.ndarray, p: int, q: int, learning_rate: float = 0.05,
             max_iters: int = 2000, patience: int = 200,
             tol: float = 1e-10) -> ArmaModel:
    """Fit ARMA(p, q) by minimizing the conditional sum of squares with Adam,
    then reflect any AR/MA roots inside the unit circle."""
    y = np.asarray(y, float)
    if not np.all(np.isfinite(y)):
        raise FitError("ARMA fitting requires a gap-free series")
    if p < 0 or q < 0:
        raise ValueError("p and q must be non-negative")
    mu0 = float(np.mean(y))
    yj = jnp.asarray(y)

    def loss_fn(params):
        resid = _css_residuals(yj - params["mu"], params["phi"],
                               params["theta"])
        return jnp.mean(resid ** 2)

    params = {"mu": jnp.asarray(mu0),
              "phi": jnp.zeros(p), "theta": jnp.zeros(q)}
    state = adam_init(params)
    vg = jax.jit(jax.value_and_grad(loss_fn))
    best, best_params, since = np.inf, params, 0
    trace = []
    for it in range(max_iters):
        val, grads = vg(params)
        val = float(val)
        trace.append(val)
        if val < best - tol:
            best, best_params, since = val, params, 0
        else:
            since += 1
            if since >= patience:
                break
        params, state = adam_step(params, grads, state, learning_rate)
    phi = reflect_roots(np.asarray(best_params["phi"]))
    theta = reflect_roots(-np.asarray(best_params["theta"]))
    theta = -theta
    model = ArmaModel(p=p, q=q, mu=float(best_params["mu"]), phi=phi,
                      theta=theta, sigma2=best, loss_trace=np.array(trace))
    # refresh sigma2 under the reflected coefficients
    model.sigma2 = float(np.mean(model.residuals(y) ** 2))
    return model


def arma_select(train: np.ndarray, valid: np.ndarray,
                orders=((0, 1, 2, 3), (0, 1, 2, 3)),
                **fit_kwargs) -> ArmaModel:
    """Grid search over (p, q), chosen by one-step MAE on the validation
    series (forecasts conditioned on the growing validation history)."""
    best_mae, best_model = np.inf, None
    for p in orders[0]:
        for q in orders[1]:
            if p == 0 and q == 0:
                continue
            model = arma_fit(train, p, q, **fit_kwargs)
            mae = _one_step_mae(model, train, valid)
            if mae < best_mae:
                best_mae, best_model = mae, model
    if best_model is None:
        raise FitError("empty ARMA order grid")
    return best_model


def _one_step_mae(model: ArmaModel, train: np.ndarray,
                  valid: np.ndarray) -> float:
    y = np.concatenate([train, valid])
    e = model.residuals(y)
    yc = y - model.mu
    n = len(y)
    preds = np.zeros(n)
    for t in range(len(train), n):
        ar = sum(model.phi[j] * yc[t - 1 - j] for j in range(model.p)
                 if t - 1 - j >= 0)
        ma = sum(model.theta[j] * e[t - 1 - j] for j in range(model.q)
                 if t - 1 - j >= 0)
        preds[t] = ar + ma + model.mu
    sl = slice(len(train), n)
    return float(np.mean(np.abs(y[sl] - preds[sl])))


class ArmaForecaster:
    """Evaluation adapter: forecasts from any anchor of a gridded series."""

    def __init__(self, model: ArmaModel, series: GriddedSeries):
        self.model = model
        cgm = series.cgm
        if np.any(~np.isfinite(cgm)):
            raise ForecastError("series contains gaps; interpolate before "
                                "baseline evaluation")
        self.cgm = cgm
        self._resid = model.residuals(cgm)

    def point_path(self, anchor: int, h: int) -> np.ndarray:
        m = self.model
        yc = list(self.cgm[:anchor + 1] - m.mu)
        el = list(self._resid[:anchor + 1])
        out = np.empty(h)
        for i in range(h):
            ar = sum(m.phi[j] * yc[-1 - j] for j in range(m.p)
                     if len(yc) > j)
            ma = sum(m.theta[j] * el[-1 - j] for j in range(m.q)
                     if len(el) > j)
            val = ar + ma
            yc.append(val)
            el.append(0.0)
            out[i] = val + m.mu
        return out


# ---------------------------------------------------------------------------
# Last-observation carry-forward
# ---------------------------------------------------------------------------

class NaiveForecaster:
    def __init__(self, series: GriddedSeries):
        self.cgm = series.cgm
        self.observed = series.observed

    def point_path(self, anchor: int, h: int) -> np.ndarray:
        idx = np.flatnonzero(self.observed[:anchor + 1])
        if idx.size == 0:
            raise ForecastError("no observation at or before the anchor")
        return np.full(h, float(self.cgm[idx[-1]]))


def naive_forecast(y_hist: np.ndarray, h: int) -> np.ndarray:
    y_hist = np.asarray(y_hist, float)
    finite = np.flatnonzero(np.isfinite(y_hist))
    if finite.size == 0:
        raise ForecastError("no finite observation in the history")
    return np.full(h, float(y_hist[finite[-1]]))


# ---------------------------------------------------------------------------
# Static simulator refit on a trailing window
# ---------------------------------------------------------------------------

@dataclass
class StaticWindowFit:
    multipliers: np.ndarray    # (K,) on the dynamic-parameter anchors
    sigma: float
    x_end: np.ndarray          # (13,) state at the window end
    d_meal_end: float
    diverged: bool = False


class StaticWindowForecaster:
    """Refits the K time-varying parameters (held constant) plus the noise
    scale on a trailing 6-hour window, then forecasts by continuing the
    simulation from the window-end state."""

    def __init__(self, series: GriddedSeries, s: physio.StaticParams | None = None,
                 d_keys: tuple = physio.DEFAULT_DYNAMIC_KEYS,
                 window_minutes: int = WINDOW_MINUTES,
                 learning_rate: float = 0.05, max_iters: int = 300,
                 dt: float = 5.0, n_sub: int = 5):
        self.series = series
        self.s = s if s is not None else physio.default_params()
        self.s_dict = {k: float(v) for k, v in self.s.as_dict().items()}
        self.d_keys = d_keys
        self.anchors = physio.dynamic_anchors(self.s, d_keys)
        self.window = max(1, int(window_minutes / series.step_minutes))
        self.lr = learning_rate
        self.max_iters = max_iters
        self.dt, self.n_sub = dt, n_sub
        # meal-mass memory along the whole series
        d_meal = np.zeros(len(series))
        cur = 0.0
        for t in range(len(series)):
            if series.carbs[t] > 0:
                cur = series.carbs[t] * physio.MG_PER_G
            d_meal[t] = cur
        self._d_meal = d_meal
        self._vg = None

    def _window_loss(self):
        if self._vg is not None:
            return self._vg
        k_names, dt, n_sub = self.d_keys, self.dt, self.n_sub
        s_dict = self.s_dict
        anchors = jnp.asarray(self.anchors)

        def loss_fn(log_mult, y, mask, insulin, carbs, x0, d_meal0):
            d_vals = anchors * jnp.exp(log_mult)
            d_seq = jnp.broadcast_to(d_vals, (y.shape[0], d_vals.shape[0]))
            states = physio._rollout(s_dict, d_seq, insulin, carbs, x0,
                                     d_meal0, dt, k_names, n_sub)
            cgm = states[:, 5] / s_dict["V_G"]
            resid = (y - cgm) * mask
            mse = jnp.sum(resid ** 2) / jnp.maximum(jnp.sum(mask), 1.0)
            return jnp.where(jnp.isfinite(mse), mse, 1e12)

        self._vg = jax.jit(jax.value_and_grad(loss_fn))
        return self._vg

    def fit_window(self, anchor: int) -> StaticWindowFit:
        lo = max(0, anchor + 1 - self.window)
        series = self.series
        y = np.nan_to_num(series.cgm[lo:anchor + 1], nan=0.0)
        mask = series.observed[lo:anchor + 1].astype(float)
        insulin = series.insulin[lo:anchor + 1]
        carbs = series.carbs[lo:anchor + 1]
        first = np.flatnonzero(mask)
        start_cgm = float(y[first[0]]) if first.size else 120.0
        basal = physio.basal_for_target(self.s, start_cgm)
        x0 = physio.steady_state(self.s, basal_rate=basal).as_array()
        d_meal0 = self._d_meal[lo - 1] if lo > 0 else 0.0

        vg = self._window_loss()
        args = (jnp.asarray(y), jnp.asarray(mask), jnp.asarray(insulin),
                jnp.asarray(carbs), jnp.asarray(x0), float(d_meal0))
        log_mult = jnp.zeros(len(self.d_keys))
        state = adam_init(log_mult)
        best, best_lm = np.inf, log_mult
        diverged = False
        for _ in range(self.max_iters):
            val, grad = vg(log_mult, *args)
            val = float(val)
            if not np.isfinite(val) or val >= 1e12:
                diverged = True
                break
            if val < best:
                best, best_lm = val, log_mult
            log_mult, state = adam_step(log_mult, grad, state, self.lr)
        if diverged:
            best_lm = jnp.zeros(len(self.d_keys))
            best = float(vg(best_lm, *args)[0])
        # window-end state under the chosen parameters
        d_vals = self.anchors * np.exp(np.asarray(best_lm))
        d_seq = np.broadcast_to(d_vals, (len(y), len(d_vals)))
        states = np.asarray(physio._rollout(
            self.s_dict, jnp.asarray(d_seq), jnp.asarray(insulin),
            jnp.asarray(carbs), jnp.asarray(x0), float(d_meal0),
            self.dt, self.d_keys, self.n_sub))
        return StaticWindowFit(multipliers=np.exp(np.asarray(best_lm)),
                               sigma=float(np.sqrt(max(best, 0.0))),
                               x_end=states[-1],
                               d_meal_end=float(self._d_meal[anchor]),
                               diverged=diverged)

    def point_path(self, anchor: int, h: int,
                   fit: StaticWindowFit | None = None) -> np.ndarray:
        if fit is None:
            fit = self.fit_window(anchor)
        series = self.series
        insulin = series.insulin[anchor + 1:anchor + 1 + h]
        carbs = series.carbs[anchor + 1:anchor + 1 + h]
        if len(insulin) < h:
            raise ForecastError("future inputs do not cover the horizon")
        d_vals = self.anchors * fit.multipliers
        d_seq = np.broadcast_to(d_vals, (h, len(d_vals)))
        states = np.asarray(physio._rollout(
            self.s_dict, jnp.asarray(d_seq), jnp.asarray(insulin),
            jnp.asarray(carbs), jnp.asarray(fit.x_end),
            float(fit.d_meal_end), self.dt, self.d_keys, self.n_sub))
        return states[:, 5] / self.s.V_G


# ---------------------------------------------------------------------------
# Externally produced forecasts
# ---------------------------------------------------------------------------

class PrecomputedForecaster:
    """Wraps a table of externally produced forecasts keyed by anchor index.

    ``table`` maps anchor -> (h_max,) array; slices are served for any
    horizon up to h_max.
    """

    def __init__(self, table: dict[int, np.ndarray]):
        self.table = {int(k): np.asarray(v, float) for k, v in table.items()}

    def point_path(self, anchor: int, h: int) -> np.ndarray:
        if anchor not in self.table:
            raise ForecastError(f"no precomputed forecast at anchor {anchor}")
        path = self.table[anchor]
        if len(path) < h:
            raise ForecastError(f"precomputed forecast at anchor {anchor} "
                                f"covers {len(path)} < {h} steps")
        return path[:h]
