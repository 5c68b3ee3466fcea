"""Posterior-predictive forecasting and counterfactual scenario rollouts.

A forecast re-runs the generative chain: sample exogenous noise for the
history from the fitted posterior (or reuse its means), standard-normal noise
for the future, unroll the latent dynamics, map to dynamic simulator
parameters, and integrate the physiology from the fitted initial state
through the anchor out to the horizon. Counterfactual scenarios share common
random numbers so path differences isolate the input effect.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from . import latent, link as link_mod, physio
from .data import GriddedSeries, STEPS_PER_DAY
from .errors import ForecastError
from .inference import FitResult, _chol_from_raw

MAX_HORIZON = 72  # 6 hours at 5-minute steps


@dataclass
class ForecastRequest:
    anchor: int                  # grid index of the last observed step
    horizon: int                 # steps ahead (5-min units)
    n_samples: int = 200
    future_insulin: np.ndarray | None = None   # (horizon,) U per step
    future_carbs: np.ndarray | None = None     # (horizon,) g per step
    keep_samples: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


@dataclass
class ForecastResult:
    mean: np.ndarray     # (h,) mg/dL
    lo95: np.ndarray
    hi95: np.ndarray
    samples: np.ndarray | None = field(default=None, repr=False)


def future_inputs(series: GriddedSeries, request: ForecastRequest,
                  basal_per_step: float | None = None):
    """Fill unspecified future inputs from the series (or flat basal)."""
    h, t = request.horizon, request.anchor
    ins = request.future_insulin
    carbs = request.future_carbs
    if ins is None:
        if t + h < len(series):
            ins = series.insulin[t + 1:t + 1 + h]
        else:
            if basal_per_step is None:
                basal_per_step = float(np.median(series.insulin))
            ins = np.full(h, basal_per_step)
    if carbs is None:
        carbs = (series.carbs[t + 1:t + 1 + h]
                 if t + h < len(series) else np.zeros(h))
    return np.asarray(ins, float), np.asarray(carbs, float)


def future_covariates(series: GriddedSeries, anchor: int, h: int) -> np.ndarray:
    """Time-of-day features computed exactly; energy held at the trailing
    24-hour profile for the matching time of day."""
    step = series.step_minutes
    tod_hist = series.tod_minutes()
    tod_future = (tod_hist[anchor] + step * np.arange(1, h + 1)) % 1440.0
    lo = max(0, anchor + 1 - STEPS_PER_DAY)
    recent_energy = series.energy[lo:anchor + 1]
    recent_tod = tod_hist[lo:anchor + 1]
    energy = np.empty(h)
    for i, tod in enumerate(tod_future):
        near = np.abs(recent_tod - tod)
        near = np.minimum(near, 1440.0 - near)
        energy[i] = recent_energy[np.argmin(near)] if len(recent_energy) \
            else 0.0
    hist_energy = series.energy[:anchor + 1]
    scale = np.std(hist_energy) if np.std(hist_energy) > 0 else 1.0
    cols = latent.default_covariates(tod_future)
    cols[:, -1] = (energy - np.mean(hist_energy)) / scale
    return cols


@partial(jax.jit, static_argnames=("k_names", "n_sub"))
def _paths(theta, m_full, s_full, cov, insulin, carbs, x0, d_meal0,
           anchors, s_dict, dt, k_names, n_sub, etas):
    """CGM paths over the whole span for a batch of noise draws."""
    A = theta["A"]
    B = theta["B"]
    Q_sqrt = _chol_from_raw(theta["Lq"])
    L0 = _chol_from_raw(theta["L0"])
    bw = s_dict["BW"]

    def one(eta):
        eps = m_full + s_full * eta
        z0 = theta["mu0"] + L0 @ eps[0]
        zs = latent.unroll_scan(z0, cov, eps[1:], A, B, Q_sqrt)
        d_seq = anchors * link_mod.softplus_unit(
            link_mod.raw_output(zs, theta["link"]))

        def body(carry, inp):
            x, d_meal = carry
            d_vals, ins_u, carb_g = inp
            d_meal = jnp.where(carb_g > 0, carb_g * physio.MG_PER_G, d_meal)
            p = dict(s_dict)
            for i, name in enumerate(k_names):
                p[name] = d_vals[i]
            ins_rate = ins_u * physio.PMOL_PER_UNIT / bw / dt
            carb_rate = carb_g * physio.MG_PER_G / dt
            x = physio.euler_substeps(x, ins_rate, carb_rate, d_meal, p,
                                      dt, n_sub)
            return (x, d_meal), x[5] / s_dict["V_G"]

        _, cgm = jax.lax.scan(body, (x0, d_meal0), (d_seq, insulin, carbs))
        return cgm

    return jax.vmap(one)(etas)


class Forecaster:
    """Forecasting front-end bound to a fitted model and its history series.

    The series must begin at the same grid origin as the training data so
    the fitted posterior aligns with the leading indices.
    """

    def __init__(self, result: FitResult, series: GriddedSeries):
        self.result = result
        self.series = series
        self.theta = jax.tree_util.tree_map(jnp.asarray, result.theta)
        self.s_dict = {k: float(v)
                       for k, v in result.effective_static().as_dict().items()}
        self.anchors = jnp.asarray(result.anchors)
        self.cov_all = latent.default_covariates(series.tod_minutes(),
                                                 series.energy)
        self.D = result.config.latent_dim

    def _noise_profile(self, n_steps: int, anchor: int, history_mode: str):
        """(m_full, s_full) of length n_steps+1 factors: fitted posterior over
        the history up to the anchor, standard normal beyond.

        Noise row k drives the latent state for observation k-1, so rows
        0..anchor+1 belong to the history even when the fitted posterior
        extends further (it may cover the evaluation span)."""
        lam = self.result.posterior
        covered = min(lam.m.shape[0], anchor + 2, n_steps + 1)
        m = np.zeros((n_steps + 1, self.D))
        s = np.ones((n_steps + 1, self.D))
        m[:covered] = lam.m[:covered]
        if history_mode == "resample":
            s[:covered] = lam.s[:covered]
        elif history_mode == "mean":
            s[:covered] = 0.0
        else:
            raise ValueError(f"unknown history_mode {history_mode!r}")
        return m, s

    def _run(self, request: ForecastRequest, etas, history_mode: str):
        t, h = request.anchor, request.horizon
        ins_f, carbs_f = future_inputs(self.series, request)
        insulin = np.concatenate([self.series.insulin[:t + 1], ins_f])
        carbs = np.concatenate([self.series.carbs[:t + 1], carbs_f])
        cov_f = (self.cov_all[t + 1:t + 1 + h]
                 if t + 1 + h <= len(self.series)
                 else future_covariates(self.series, t, h))
        cov = np.concatenate([self.cov_all[:t + 1], cov_f])
        n_steps = t + 1 + h
        m_full, s_full = self._noise_profile(n_steps, t, history_mode)
        cgm = _paths(self.theta, jnp.asarray(m_full), jnp.asarray(s_full),
                     jnp.asarray(cov), jnp.asarray(insulin),
                     jnp.asarray(carbs), jnp.asarray(self.result.x0),
                     0.0, self.anchors, self.s_dict,
                     float(self.result.config.dt_minutes),
                     self.result.config.d_keys,
                     int(self.result.config.n_sub), etas)
        return np.asarray(cgm)[:, t + 1:]

    def _etas(self, request: ForecastRequest, seed: int, n: int):
        key = jax.random.PRNGKey(seed)
        shape = (n, request.anchor + 2 + request.horizon, self.D)
        return jax.random.normal(key, shape)

    def sample(self, request: ForecastRequest, seed: int = 0,
               history_mode: str = "resample",
               max_retries: int = 8) -> np.ndarray:
        """One posterior-predictive path of length h (divergent draws are
        rejected and redrawn, up to a bounded number of retries)."""
        for attempt in range(max_retries):
            eta = self._etas(request, seed + 1000003 * attempt, 1)
            path = self._run(request, eta, history_mode)[0]
            if np.all(np.isfinite(path)):
                return path
        raise ForecastError(
            f"simulator diverged in {max_retries} consecutive sample draws")

    def point(self, request: ForecastRequest, seed: int = 0,
              history_mode: str = "resample") -> ForecastResult:
        """Plug-in point forecast: sample mean with empirical 95% bounds."""
        etas = self._etas(request, seed, request.n_samples)
        paths = self._run(request, etas, history_mode)
        ok = np.all(np.isfinite(paths), axis=1)
        if ok.sum() < max(1, request.n_samples // 2):
            raise ForecastError(
                f"{int((~ok).sum())} of {request.n_samples} forecast samples "
                "diverged")
        paths = paths[ok]
        return ForecastResult(
            mean=paths.mean(axis=0),
            lo95=np.percentile(paths, 2.5, axis=0),
            hi95=np.percentile(paths, 97.5, axis=0),
            samples=paths if request.keep_samples else None)

    def counterfactual(self, base: ForecastRequest,
                       scenarios: dict[str, tuple[np.ndarray, np.ndarray]],
                       seed: int = 0,
                       history_mode: str = "resample") -> dict[str, ForecastResult]:
        """One forecast per scenario under common random numbers.

        Each scenario supplies (future_insulin, future_carbs) arrays sharing
        the base request's anchor and horizon.
        """
        etas = self._etas(base, seed, base.n_samples)
        out = {}
        for name, (ins, carbs) in scenarios.items():
            req = ForecastRequest(
                anchor=base.anchor, horizon=base.horizon,
                n_samples=base.n_samples, future_insulin=np.asarray(ins),
                future_carbs=np.asarray(carbs),
                keep_samples=base.keep_samples)
            paths = self._run(req, etas, history_mode)
            ok = np.all(np.isfinite(paths), axis=1)
            if ok.sum() < max(1, base.n_samples // 2):
                raise ForecastError(f"scenario {name!r}: too many divergent "
                                    "samples")
            paths = paths[ok]
            out[name] = ForecastResult(
                mean=paths.mean(axis=0),
                lo95=np.percentile(paths, 2.5, axis=0),
                hi95=np.percentile(paths, 97.5, axis=0),
                samples=paths if base.keep_samples else None)
        return out


@partial(jax.jit, static_argnames=("k_names", "n_sub"))
def _future_paths(theta, z_anchor, cov_f, insulin, carbs, x_anchor,
                  d_meal0, anchors, s_dict, dt, k_names, n_sub, etas):
    """CGM continuation paths from a cached (latent, physiological) state."""
    A, B = theta["A"], theta["B"]
    Q_sqrt = _chol_from_raw(theta["Lq"])
    bw = s_dict["BW"]

    def one(eta):
        zs = latent.unroll_scan(z_anchor, cov_f, eta, A, B, Q_sqrt)
        d_seq = anchors * link_mod.softplus_unit(
            link_mod.raw_output(zs, theta["link"]))

        def body(carry, inp):
            x, d_meal = carry
            d_vals, ins_u, carb_g = inp
            d_meal = jnp.where(carb_g > 0, carb_g * physio.MG_PER_G, d_meal)
            p = dict(s_dict)
            for i, name in enumerate(k_names):
                p[name] = d_vals[i]
            ins_rate = ins_u * physio.PMOL_PER_UNIT / bw / dt
            carb_rate = carb_g * physio.MG_PER_G / dt
            x = physio.euler_substeps(x, ins_rate, carb_rate, d_meal, p,
                                      dt, n_sub)
            return (x, d_meal), x[5] / s_dict["V_G"]

        _, cgm = jax.lax.scan(body, (x_anchor, d_meal0),
                              (d_seq, insulin, carbs))
        return cgm

    return jax.vmap(one)(etas)


class CachedStateForecaster:
    """Fast point forecaster for batch evaluation.

    Simulates the posterior-mean trajectory over the whole series once, then
    forecasts from any anchor by continuing the deterministic chain from the
    cached latent/physiological state at that anchor.
    """

    def __init__(self, result: FitResult, series: GriddedSeries):
        self.result = result
        self.series = series
        self.s = result.effective_static()
        self.s_dict = {k: float(v) for k, v in self.s.as_dict().items()}
        self.theta = jax.tree_util.tree_map(jnp.asarray, result.theta)
        self.anchors = np.asarray(result.anchors)
        cov = latent.default_covariates(series.tod_minutes(), series.energy)
        self.cov_all = cov
        dyn = result.dynamics
        T = len(series)
        lam = result.posterior
        eps = np.zeros((T, dyn.dim))
        covered = min(lam.m.shape[0] - 1, T)
        eps[:covered] = lam.m[1:covered + 1]
        z0 = dyn.mu0 + dyn.Sigma0_sqrt @ lam.m[0]
        self.z_path = latent.unroll(z0, cov, eps, dyn)
        d_seq = np.asarray(link_mod.link(self.z_path, result.theta["link"],
                                         self.anchors))
        self.d_path = d_seq
        states, cgm = physio.run_schedule(
            self.s, series.insulin, series.carbs, d_seq=d_seq,
            x0=physio.PhysioState.from_array(result.x0),
            d_keys=result.config.d_keys,
            dt=result.config.dt_minutes, n_sub=result.config.n_sub)
        self.states = states
        self.fitted_cgm = cgm
        # meal-mass memory along the path
        d_meal = np.zeros(T)
        cur = 0.0
        for t in range(T):
            if series.carbs[t] > 0:
                cur = series.carbs[t] * physio.MG_PER_G
            d_meal[t] = cur
        self.d_meal_path = d_meal

    def sample_future(self, anchor: int, h: int, etas,
                      future_insulin=None, future_carbs=None) -> np.ndarray:
        """(M, h) CGM paths continuing the cached state with sampled noise.

        ``etas`` is (M, h, D) standard-normal noise; passing the same array
        across scenarios gives common random numbers. Jit-compiled once per
        (M, h) shape, so batch evaluation over many anchors stays fast.
        """
        series = self.series
        if future_insulin is None:
            future_insulin = series.insulin[anchor + 1:anchor + 1 + h]
        if future_carbs is None:
            future_carbs = series.carbs[anchor + 1:anchor + 1 + h]
        if len(future_insulin) < h or len(future_carbs) < h:
            raise ForecastError("future inputs do not cover the horizon")
        cov_f = (self.cov_all[anchor + 1:anchor + 1 + h]
                 if anchor + 1 + h <= len(series)
                 else future_covariates(series, anchor, h))
        cgm = _future_paths(
            self.theta, jnp.asarray(self.z_path[anchor]),
            jnp.asarray(cov_f),
            jnp.asarray(np.asarray(future_insulin, float)),
            jnp.asarray(np.asarray(future_carbs, float)),
            jnp.asarray(self.states[anchor]),
            float(self.d_meal_path[anchor]), jnp.asarray(self.anchors),
            self.s_dict, float(self.result.config.dt_minutes),
            self.result.config.d_keys, int(self.result.config.n_sub),
            jnp.asarray(etas))
        return np.asarray(cgm)

    def counterfactual(self, anchor: int,
                       scenarios: dict[str, tuple[np.ndarray, np.ndarray]],
                       h: int, n_samples: int = 50,
                       seed: int = 0) -> dict[str, ForecastResult]:
        """Scenario forecasts from the cached state under common random
        numbers."""
        D = self.result.config.latent_dim
        etas = jax.random.normal(jax.random.PRNGKey(seed), (n_samples, h, D))
        out = {}
        for name, (ins, carbs) in scenarios.items():
            paths = self.sample_future(anchor, h, etas,
                                       future_insulin=np.asarray(ins, float),
                                       future_carbs=np.asarray(carbs, float))
            ok = np.all(np.isfinite(paths), axis=1)
            if ok.sum() < max(1, n_samples // 2):
                raise ForecastError(f"scenario {name!r}: too many divergent "
                                    "samples")
            paths = paths[ok]
            out[name] = ForecastResult(
                mean=paths.mean(axis=0),
                lo95=np.percentile(paths, 2.5, axis=0),
                hi95=np.percentile(paths, 97.5, axis=0))
        return out

    def point_path(self, anchor: int, h: int,
                   future_insulin=None, future_carbs=None) -> np.ndarray:
        """Deterministic h-step path from the cached state at ``anchor``."""
        series = self.series
        if future_insulin is None:
            future_insulin = series.insulin[anchor + 1:anchor + 1 + h]
        if future_carbs is None:
            future_carbs = series.carbs[anchor + 1:anchor + 1 + h]
        if len(future_insulin) < h or len(future_carbs) < h:
            raise ForecastError("future inputs do not cover the horizon")
        cov_f = (self.cov_all[anchor + 1:anchor + 1 + h]
                 if anchor + 1 + h <= len(series)
                 else future_covariates(series, anchor, h))
        dyn = self.result.dynamics
        z = self.z_path[anchor]
        eps = np.zeros((h, dyn.dim))
        zs = latent.unroll(z, cov_f, eps, dyn)
        d_seq = np.asarray(link_mod.link(zs, self.result.theta["link"],
                                         self.anchors))
        states = physio._rollout(
            self.s_dict, jnp.asarray(d_seq),
            jnp.asarray(np.asarray(future_insulin, float)),
            jnp.asarray(np.asarray(future_carbs, float)),
            jnp.asarray(self.states[anchor]),
            float(self.d_meal_path[anchor]),
            float(self.result.config.dt_minutes),
            self.result.config.d_keys, int(self.result.config.n_sub))
        return np.asarray(states)[:, 5] / self.s.V_G


def load_scenarios(path, basal_per_step: float, horizon: int) -> dict:
    """Scenario JSON: {name: [[time_offset_minutes, carbs_g, bolus_U], ...]}.

    Returns {name: (future_insulin, future_carbs)} arrays over the horizon,
    with constant basal delivery underneath the scheduled events.
    """
    with open(path) as fh:
        doc = json.load(fh)
    out = {}
    for name, events in doc.items():
        ins = np.full(horizon, basal_per_step)
        carbs = np.zeros(horizon)
        for offset_min, grams, units in events:
            idx = int(offset_min) // 5
            if 0 <= idx < horizon:
                carbs[idx] += float(grams)
                ins[idx] += float(units)
        out[name] = (ins, carbs)
    return out


def meal_bolus_grid(basal_per_step: float, horizon: int,
                    offset_minutes: float = 60.0, meal_grams: float = 50.0,
                    bolus_units: float = 8.0) -> dict:
    """The canonical 2x2 counterfactual grid: {no meal, meal} x {no bolus,
    bolus}, each event one hour after the anchor."""
    idx = int(offset_minutes) // 5
    if not 0 <= idx < horizon:
        raise ValueError(
            f"event offset {offset_minutes} min falls outside the "
            f"{horizon * 5}-minute horizon")
    out = {}
    for meal in (False, True):
        for bolus in (False, True):
            ins = np.full(horizon, basal_per_step)
            carbs = np.zeros(horizon)
            if meal:
                carbs[idx] = meal_grams
            if bolus:
                ins[idx] += bolus_units
            name = f"{'meal' if meal else 'nomeal'}_{'bolus' if bolus else 'nobolus'}"
            out[name] = (ins, carbs)
    return out
