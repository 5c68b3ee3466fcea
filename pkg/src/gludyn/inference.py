"""Variational fitting of the hybrid simulator / state-space model.

The latent path is parameterized non-centrally: a mean-field Gaussian
posterior is placed over the exogenous noise variables (one factor per
timestep, plus one for the initial state), and the latent states are obtained
by pushing sampled noise through the linear dynamics. The objective is the
reparameterized evidence lower bound minus a stability penalty on the
transition matrix; optimization is Adam with a spectral projection of the
transition matrix after every update.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, asdict
from functools import partial

import jax
import jax.flatten_util
import jax.numpy as jnp
import numpy as np

from . import latent, link as link_mod, physio
from .data import GriddedSeries
from .errors import FitError, GludynError

LOG_2PI = float(np.log(2.0 * np.pi))
DIVERGENCE_PENALTY = -1e12


@dataclass
class VariationalPosterior:
    """Per-timestep diagonal Gaussian over exogenous noise, t = 0..T."""

    m: np.ndarray       # (T+1, D)
    log_s: np.ndarray   # (T+1, D)

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64)
        self.log_s = np.asarray(self.log_s, dtype=np.float64)
        if self.m.shape != self.log_s.shape:
            raise ValueError("m and log_s must have the same shape")

    @property
    def s(self) -> np.ndarray:
        return np.exp(self.log_s)


def sample_q(lam: VariationalPosterior, rng: np.random.Generator) -> np.ndarray:
    """Reparameterized draw eps = m + s * eta, eta ~ N(0, I)."""
    eta = rng.standard_normal(lam.m.shape)
    return lam.m + np.maximum(lam.s, 1e-8) * eta


def kl_term(lam: VariationalPosterior) -> float:
    """KL(q || N(0, I)) summed over all factors; zero iff m=0, s=1."""
    m, log_s = jnp.asarray(lam.m), jnp.asarray(lam.log_s)
    s2 = jnp.exp(2.0 * log_s)
    return float(jnp.sum(0.5 * (m ** 2 + s2 - 1.0 - 2.0 * log_s)))


@dataclass
class FitConfig:
    learning_rate: float = 1e-4
    mc_samples: int = 1
    stability_weight: float = 1.0
    signed_penalty: bool = False
    patience: int = 500
    max_iters: int = 20000
    seed: int = 0
    latent_dim: int = 3
    d_keys: tuple = physio.DEFAULT_DYNAMIC_KEYS
    dt_minutes: float = 5.0
    n_sub: int = 5
    sigma_init: float = 10.0
    a_init: float = 0.9
    q_init: float = 0.05
    sigma0_init: float = 0.1
    posterior_s_init: float = 0.1
    fit_static_keys: tuple = ()   # statics to unfreeze (log-scale multipliers)
    project_every: int = 1
    max_skip_fraction: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0 or self.patience <= 0 or self.max_iters <= 0:
            raise ValueError("rates and counts must be positive")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        self.d_keys = tuple(self.d_keys)
        self.fit_static_keys = tuple(self.fit_static_keys)


def init_theta(config: FitConfig, n_covariates: int) -> dict:
    """Unconstrained optimizer-facing parameter pytree."""
    D, K = config.latent_dim, len(config.d_keys)
    return {
        "A": config.a_init * np.eye(D),
        "B": np.zeros((D, n_covariates)),
        "Lq": np.diag(np.full(D, np.log(config.q_init))),
        "mu0": np.zeros(D),
        "L0": np.diag(np.full(D, np.log(config.sigma0_init))),
        "link": link_mod.init_link(D, K, config.seed),
        "log_sigma": np.array(np.log(config.sigma_init)),
        "s_log_mult": {k: np.array(0.0) for k in config.fit_static_keys},
    }


def init_posterior(T: int, config: FitConfig) -> VariationalPosterior:
    D = config.latent_dim
    return VariationalPosterior(
        m=np.zeros((T + 1, D)),
        log_s=np.full((T + 1, D), np.log(config.posterior_s_init)))


def _chol_from_raw(L_raw):
    """Lower-triangular factor with positive (exp) diagonal."""
    return jnp.tril(L_raw, -1) + jnp.diag(jnp.exp(jnp.diag(L_raw)))


def dynamics_from_theta(theta) -> latent.DynamicsParams:
    return latent.DynamicsParams(
        A=np.asarray(theta["A"]),
        B=np.asarray(theta["B"]),
        Q_sqrt=np.asarray(_chol_from_raw(jnp.asarray(theta["Lq"]))),
        mu0=np.asarray(theta["mu0"]),
        Sigma0_sqrt=np.asarray(_chol_from_raw(jnp.asarray(theta["L0"]))))


@dataclass
class ModelData:
    """Arrays the objective closes over (one training window)."""

    y: np.ndarray           # (T,) CGM, NaN for missing
    mask: np.ndarray        # (T,) observed flags
    covariates: np.ndarray  # (T, J)
    insulin: np.ndarray     # (T,) per-step U
    carbs: np.ndarray       # (T,) per-step g
    x0: np.ndarray          # (13,) initial physiological state
    d_meal0: float = 0.0

    @classmethod
    def from_series(cls, series: GriddedSeries, s: physio.StaticParams,
                    x0: physio.PhysioState | None = None) -> "ModelData":
        mask = series.observed
        if not mask.any():
            raise GludynError("training split has no observed CGM")
        if x0 is None:
            first = float(series.cgm[np.flatnonzero(mask)[0]])
            basal = physio.basal_for_target(s, first)
            x0 = physio.steady_state(s, basal_rate=basal)
        cov = latent.default_covariates(series.tod_minutes(), series.energy)
        return cls(y=np.nan_to_num(series.cgm, nan=0.0),
                   mask=mask.astype(np.float64), covariates=cov,
                   insulin=series.insulin.copy(), carbs=series.carbs.copy(),
                   x0=x0.as_array())


def make_elbo(data: ModelData, s: physio.StaticParams, config: FitConfig,
              emission: str = "simulator", C=None, c0: float = 0.0):
    """Build elbo(theta_pytree, lam_pytree, eta) -> scalar (jax-traceable).

    ``emission`` selects the full simulator chain or a linear read-out of the
    latent state (the tractable special case used for oracle checks).
    """
    s_dict = {k: float(v) for k, v in s.as_dict().items()}
    anchors = jnp.asarray(physio.dynamic_anchors(s, config.d_keys))
    k_names = config.d_keys
    D = config.latent_dim
    dt, n_sub = config.dt_minutes, config.n_sub
    y = jnp.asarray(data.y)
    mask = jnp.asarray(data.mask)
    cov = jnp.asarray(data.covariates)
    insulin = jnp.asarray(data.insulin)
    carbs = jnp.asarray(data.carbs)
    x0 = jnp.asarray(data.x0)
    n_obs = jnp.sum(mask)
    C_arr = None if C is None else jnp.asarray(C)

    def _simulate_with(s_local, d_seq):
        bw = s_local["BW"]

        def body(carry, inp):
            x, d_meal = carry
            d_vals, ins_u, carb_g = inp
            d_meal = jnp.where(carb_g > 0, carb_g * physio.MG_PER_G, d_meal)
            p = dict(s_local)
            for i, name in enumerate(k_names):
                p[name] = d_vals[i]
            ins_rate = ins_u * physio.PMOL_PER_UNIT / bw / dt
            carb_rate = carb_g * physio.MG_PER_G / dt
            x = physio.euler_substeps(x, ins_rate, carb_rate, d_meal, p,
                                      dt, n_sub)
            return (x, d_meal), x[5] / s_local["V_G"]

        _, cgm = jax.lax.scan(body, (x0, data.d_meal0),
                              (d_seq, insulin, carbs))
        return cgm

    def elbo(theta, lam, eta):
        A = theta["A"]
        Q_sqrt = _chol_from_raw(theta["Lq"])
        L0 = _chol_from_raw(theta["L0"])
        s_lam = jnp.exp(lam["log_s"])
        eps = lam["m"] + s_lam * eta
        z0 = theta["mu0"] + L0 @ eps[0]
        zs = latent.unroll_scan(z0, cov, eps[1:], A, theta["B"], Q_sqrt)

        if emission == "simulator":
            s_local = dict(s_dict)
            for k, v in (theta.get("s_log_mult") or {}).items():
                s_local[k] = s_local[k] * jnp.exp(v)
            d_seq = anchors * link_mod.softplus_unit(
                link_mod.raw_output(zs, theta["link"]))
            mean = _simulate_with(s_local, d_seq)
        elif emission == "linear":
            mean = zs @ C_arr + c0
        else:
            raise ValueError(f"unknown emission {emission!r}")

        sigma = jnp.exp(theta["log_sigma"])
        resid = (y - mean) * mask
        loglik = (-0.5 * jnp.sum(resid ** 2) / sigma ** 2
                  - n_obs * (theta["log_sigma"] + 0.5 * LOG_2PI))
        kl = jnp.sum(0.5 * (lam["m"] ** 2 + s_lam ** 2 - 1.0
                            - 2.0 * lam["log_s"]))
        pen = latent.stability_penalty(A, config.stability_weight,
                                       signed=config.signed_penalty)
        out = loglik - kl - pen
        return jnp.where(jnp.isfinite(out), out, DIVERGENCE_PENALTY)

    return elbo


def elbo_estimate(theta, lam: VariationalPosterior, data: ModelData,
                  s: physio.StaticParams, config: FitConfig,
                  n_samples: int = 1, seed: int = 0,
                  emission: str = "simulator", C=None, c0: float = 0.0) -> float:
    """Monte Carlo ELBO estimate averaged over ``n_samples`` noise draws."""
    elbo = make_elbo(data, s, config, emission=emission, C=C, c0=c0)
    lam_tree = {"m": jnp.asarray(lam.m), "log_s": jnp.asarray(lam.log_s)}
    theta_j = jax.tree_util.tree_map(jnp.asarray, theta)
    key = jax.random.PRNGKey(seed)
    etas = jax.random.normal(key, (n_samples,) + lam.m.shape)
    vals = jax.vmap(lambda e: elbo(theta_j, lam_tree, e))(etas)
    return float(jnp.mean(vals))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def adam_init(params) -> dict:
    zeros = jax.tree_util.tree_map(jnp.zeros_like,
                                   jax.tree_util.tree_map(jnp.asarray, params))
    return {"m": zeros, "v": copy.deepcopy(zeros), "t": 0}


def adam_step(params, grads, state, lr, b1: float = 0.9, b2: float = 0.999,
              eps: float = 1e-8):
    """One Adam update with bias correction; pure in all arguments."""
    t = state["t"] + 1
    m = jax.tree_util.tree_map(lambda mo, g: b1 * mo + (1 - b1) * g,
                               state["m"], grads)
    v = jax.tree_util.tree_map(lambda vo, g: b2 * vo + (1 - b2) * g ** 2,
                               state["v"], grads)
    bc1, bc2 = 1 - b1 ** t, 1 - b2 ** t
    new_params = jax.tree_util.tree_map(
        lambda p, mo, vo: p - lr * (mo / bc1) / (jnp.sqrt(vo / bc2) + eps),
        params, m, v)
    return new_params, {"m": m, "v": v, "t": t}


# ---------------------------------------------------------------------------
# Fit loop
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    theta: dict
    posterior: VariationalPosterior
    config: FitConfig
    loss_trace: np.ndarray
    static_params: physio.StaticParams
    x0: np.ndarray
    fingerprint: dict = field(default_factory=dict)
    n_skipped: int = 0
    n_iters: int = 0

    @property
    def dynamics(self) -> latent.DynamicsParams:
        return dynamics_from_theta(self.theta)

    @property
    def sigma(self) -> float:
        return float(np.exp(self.theta["log_sigma"]))

    @property
    def anchors(self) -> np.ndarray:
        return physio.dynamic_anchors(self.static_params, self.config.d_keys)

    def effective_static(self) -> physio.StaticParams:
        s = self.static_params
        mults = self.theta.get("s_log_mult") or {}
        if mults:
            s = s.replace(**{k: getattr(s, k) * float(np.exp(v))
                             for k, v in mults.items()})
        return s

    def implied_d_path(self, data: ModelData) -> np.ndarray:
        """Dynamic-parameter trajectory at the posterior mean noise."""
        dyn = self.dynamics
        eps = self.posterior.m
        z0 = dyn.mu0 + dyn.Sigma0_sqrt @ eps[0]
        zs = latent.unroll(z0, data.covariates, eps[1:], dyn)
        return np.asarray(link_mod.link(zs, self.theta["link"], self.anchors))


def fit(series: GriddedSeries, config: FitConfig,
        s: physio.StaticParams | None = None,
        x0: physio.PhysioState | None = None,
        emission: str = "simulator", C=None, c0: float = 0.0,
        theta_init: dict | None = None,
        fit_theta: bool = True,
        callback=None) -> FitResult:
    """Run the variational fitting loop until patience or max_iters.

    Deterministic given ``config.seed``. ``fit_theta=False`` optimizes only
    the variational posterior (used by oracle checks).
    """
    if s is None:
        s = physio.default_params()
    data = ModelData.from_series(series, s, x0=x0)
    T = len(data.y)
    elbo = make_elbo(data, s, config, emission=emission, C=C, c0=c0)

    theta = theta_init if theta_init is not None else init_theta(
        config, data.covariates.shape[1])
    lam0 = init_posterior(T, config)
    params = {
        "theta": jax.tree_util.tree_map(jnp.asarray, theta),
        "lam": {"m": jnp.asarray(lam0.m), "log_s": jnp.asarray(lam0.log_s)},
    }

    n_mc = config.mc_samples

    def loss_fn(p, eta):
        if n_mc == 1:
            val = elbo(p["theta"], p["lam"], eta[0])
        else:
            val = jnp.mean(jax.vmap(
                lambda e: elbo(p["theta"], p["lam"], e))(eta))
        return -val

    @jax.jit
    def update(p, opt_state, eta):
        loss, grads = jax.value_and_grad(
            lambda q: loss_fn(q, eta))(p)
        if not fit_theta:
            grads = {"theta": jax.tree_util.tree_map(jnp.zeros_like,
                                                     grads["theta"]),
                     "lam": grads["lam"]}
        flat, _ = jax.flatten_util.ravel_pytree(grads)
        ok = jnp.all(jnp.isfinite(flat))
        safe_grads = jax.tree_util.tree_map(
            lambda g: jnp.where(ok, g, 0.0), grads)
        new_p, new_state = adam_step(p, safe_grads, opt_state,
                                     config.learning_rate)
        new_p = jax.tree_util.tree_map(
            lambda a, b: jnp.where(ok, a, b), new_p, p)
        return new_p, new_state, loss, ok

    opt_state = adam_init(params)
    key = jax.random.PRNGKey(config.seed)
    eta_shape = (n_mc, T + 1, config.latent_dim)

    best_loss = np.inf
    best_params = params
    since_best = 0
    n_skipped = 0
    trace = []
    it = 0
    for it in range(1, config.max_iters + 1):
        eta = jax.random.normal(jax.random.fold_in(key, it), eta_shape)
        params, opt_state, loss, ok = update(params, opt_state, eta)
        loss = float(loss)
        if not bool(ok):
            n_skipped += 1
            if n_skipped > config.max_skip_fraction * max(it, 100):
                raise FitError(
                    f"{n_skipped} non-finite gradient steps in {it} "
                    "iterations; aborting")
        if fit_theta and config.project_every and \
                it % config.project_every == 0:
            A = np.asarray(params["theta"]["A"])
            A_proj = latent.spectral_project(A)
            if not np.array_equal(A_proj, A):
                params["theta"]["A"] = jnp.asarray(A_proj)
        trace.append(loss)
        if loss < best_loss:
            best_loss = loss
            best_params = jax.tree_util.tree_map(lambda x: x, params)
            since_best = 0
        else:
            since_best += 1
        if callback is not None:
            callback(it, loss, params)
        if since_best >= config.patience:
            break

    theta_np = jax.tree_util.tree_map(np.asarray, best_params["theta"])
    lam_np = VariationalPosterior(
        m=np.asarray(best_params["lam"]["m"]),
        log_s=np.asarray(best_params["lam"]["log_s"]))
    return FitResult(theta=theta_np, posterior=lam_np, config=config,
                     loss_trace=np.asarray(trace),
                     static_params=s, x0=data.x0,
                     fingerprint=series.fingerprint(),
                     n_skipped=n_skipped, n_iters=it)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def save_checkpoint(result: FitResult, path) -> None:
    doc = {
        "theta": _to_jsonable(result.theta),
        "posterior": {"m": result.posterior.m.tolist(),
                      "log_s": result.posterior.log_s.tolist()},
        "config": _to_jsonable(asdict(result.config)),
        "loss_trace": [round(float(v), 10) for v in result.loss_trace],
        "static_params": result.static_params.as_dict(),
        "x0": result.x0.tolist(),
        "fingerprint": result.fingerprint,
        "n_skipped": result.n_skipped,
        "n_iters": result.n_iters,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path, series: GriddedSeries | None = None) -> FitResult:
    """Load a checkpoint; verifies the data fingerprint when a series is given."""
    with open(path) as fh:
        doc = json.load(fh)
    if series is not None:
        fp = series.fingerprint()
        if fp != doc["fingerprint"]:
            raise GludynError("checkpoint fingerprint does not match the data")
    cfg_raw = dict(doc["config"])
    cfg_raw["d_keys"] = tuple(cfg_raw["d_keys"])
    cfg_raw["fit_static_keys"] = tuple(cfg_raw["fit_static_keys"])
    config = FitConfig(**cfg_raw)

    def arr(x):
        return np.asarray(x, dtype=np.float64)

    theta = {k: (v if isinstance(v, dict) else arr(v))
             for k, v in doc["theta"].items()}
    theta["link"] = {k: arr(v) for k, v in doc["theta"]["link"].items()}
    theta["s_log_mult"] = {k: arr(v)
                           for k, v in doc["theta"]["s_log_mult"].items()}
    return FitResult(
        theta=theta,
        posterior=VariationalPosterior(m=arr(doc["posterior"]["m"]),
                                       log_s=arr(doc["posterior"]["log_s"])),
        config=config,
        loss_trace=arr(doc["loss_trace"]),
        static_params=physio.StaticParams.from_dict(doc["static_params"]),
        x0=arr(doc["x0"]),
        fingerprint=doc["fingerprint"],
        n_skipped=int(doc["n_skipped"]),
        n_iters=int(doc["n_iters"]))
