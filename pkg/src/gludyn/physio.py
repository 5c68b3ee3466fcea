"""Multi-compartment glucose/insulin ODE simulator.

State layout (13 components, indexable 0..12 in code, 1..13 in the classic
compartment numbering):

    0  q_sto1   stomach glucose, solid phase (mg)
    1  q_sto2   stomach glucose, liquid phase (mg)
    2  q_gut    gut glucose (mg)
    3  g_p      plasma glucose (mg/kg)
    4  g_t      tissue glucose (mg/kg)
    5  g_s      subcutaneous glucose signal (mg/kg)
    6  i_p      plasma insulin (pmol/kg)
    7  i_l      liver insulin (pmol/kg)
    8  x_l      delayed insulin signal (pmol/L)
    9  x_act    active insulin (pmol/L)
    10 i_tilde  delayed plasma insulin (pmol/L)
    11 i_sc1    subcutaneous insulin depot 1 (pmol/kg)
    12 i_sc2    subcutaneous insulin depot 2 (pmol/kg)

Unit conventions: 1 insulin unit = 6000 pmol; carbohydrates enter in grams
and are converted to mg. Per-step input amounts are spread uniformly over the
step as rates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace
from functools import partial
from importlib import resources
from typing import Callable, Iterable, Mapping, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from scipy.optimize import brentq

from .errors import DivergenceError, InitializationError, StateValidityError

STATE_FIELDS = (
    "q_sto1", "q_sto2", "q_gut", "g_p", "g_t", "g_s", "i_p", "i_l",
    "x_l", "x_act", "i_tilde", "i_sc1", "i_sc2",
)

PARAM_FIELDS = (
    "k_min", "k_max", "k_abs", "k_gri", "f", "b", "d", "V_G", "k_1", "k_2",
    "V_I", "m_1", "m_2", "m_3", "m_4", "k_p1", "k_p2", "k_p3", "k_i",
    "F_snc", "V_m0", "V_mx", "K_m0", "p_2U", "I_b", "r_1", "k_e1", "k_e2",
    "k_a1", "k_a2", "k_d", "k_sc", "BW",
)

# Parameters allowed to vary in time by default: insulin sensitivity,
# carbohydrate absorption, and baseline endogenous glucose production.
DEFAULT_DYNAMIC_KEYS = ("V_mx", "k_abs", "k_p1")

PMOL_PER_UNIT = 6000.0
MG_PER_G = 1000.0

_FRACTION_FIELDS = ("f", "b", "d")


class ExogenousInput(NamedTuple):
    """Inputs delivered during one integration step."""

    insulin_units: float
    carb_grams: float


@dataclass(frozen=True)
class PhysioState:
    q_sto1: float
    q_sto2: float
    q_gut: float
    g_p: float
    g_t: float
    g_s: float
    i_p: float
    i_l: float
    x_l: float
    x_act: float
    i_tilde: float
    i_sc1: float
    i_sc2: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in STATE_FIELDS], dtype=np.float64)

    @classmethod
    def from_array(cls, x) -> "PhysioState":
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (len(STATE_FIELDS),):
            raise ValueError(f"expected shape (13,), got {x.shape}")
        return cls(**dict(zip(STATE_FIELDS, (float(v) for v in x))))

    @classmethod
    def zero(cls) -> "PhysioState":
        return cls.from_array(np.zeros(len(STATE_FIELDS)))

    def validate(self) -> None:
        arr = self.as_array()
        if not np.all(np.isfinite(arr)):
            bad = STATE_FIELDS[int(np.argmax(~np.isfinite(arr)))]
            raise StateValidityError(f"non-finite state component {bad!r}")


@dataclass(frozen=True)
class StaticParams:
    k_min: float
    k_max: float
    k_abs: float
    k_gri: float
    f: float
    b: float
    d: float
    V_G: float
    k_1: float
    k_2: float
    V_I: float
    m_1: float
    m_2: float
    m_3: float
    m_4: float
    k_p1: float
    k_p2: float
    k_p3: float
    k_i: float
    F_snc: float
    V_m0: float
    V_mx: float
    K_m0: float
    p_2U: float
    I_b: float
    r_1: float
    k_e1: float
    k_e2: float
    k_a1: float
    k_a2: float
    k_d: float
    k_sc: float
    BW: float

    def __post_init__(self):
        for name in ("k_min", "k_max", "k_gri", "k_abs", "V_G", "k_1", "k_2",
                     "V_I", "m_1", "m_2", "m_3", "m_4", "k_i", "V_m0", "K_m0",
                     "p_2U", "k_a1", "k_a2", "k_d", "k_sc", "BW"):
            if not getattr(self, name) > 0:
                raise ValueError(f"parameter {name} must be strictly positive")
        for name in _FRACTION_FIELDS:
            v = getattr(self, name)
            if not (0 < v < 1):
                raise ValueError(f"parameter {name} must lie in (0, 1)")
        if self.k_min > self.k_max:
            raise ValueError("k_min must not exceed k_max")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def replace(self, **kwargs) -> "StaticParams":
        return replace(self, **kwargs)

    @classmethod
    def from_dict(cls, values: Mapping[str, float],
                  fill_defaults: bool = False) -> "StaticParams":
        """Build from a flat mapping keyed by symbol names.

        Unknown keys are rejected. Missing keys raise unless
        ``fill_defaults`` explicitly permits filling from the shipped
        literature defaults.
        """
        clean = {k: v for k, v in values.items() if not k.startswith("_")}
        unknown = set(clean) - set(PARAM_FIELDS)
        if unknown:
            raise ValueError(f"unknown parameter keys: {sorted(unknown)}")
        missing = set(PARAM_FIELDS) - set(clean)
        if missing:
            if not fill_defaults:
                raise ValueError(
                    f"missing parameter keys: {sorted(missing)} "
                    "(pass fill_defaults=True to fill from the default file)")
            defaults = default_params().as_dict()
            for k in missing:
                clean[k] = defaults[k]
        return cls(**{k: float(v) for k, v in clean.items()})

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, fill_defaults: bool = False) -> "StaticParams":
        return cls.from_dict(json.loads(text), fill_defaults=fill_defaults)


def default_params() -> StaticParams:
    """Literature-sourced adult-average parameter set."""
    text = resources.files("gludyn.params").joinpath("adult_average.json").read_text()
    raw = {k: v for k, v in json.loads(text).items() if not k.startswith("_")}
    return StaticParams(**{k: float(v) for k, v in raw.items()})


def dynamic_anchors(s: StaticParams,
                    keys: Iterable[str] = DEFAULT_DYNAMIC_KEYS) -> np.ndarray:
    """Anchor values (defaults) for the time-varying parameter subset."""
    d = s.as_dict()
    return np.array([d[k] for k in keys], dtype=np.float64)


# ---------------------------------------------------------------------------
# Core dynamics (jax-traceable; also accept plain floats / numpy scalars)
# ---------------------------------------------------------------------------

def gastric_emptying_rate(q_sto, d_meal, p: Mapping[str, float]):
    """Nonlinear gastric emptying rate, bounded by [k_min, k_max].

    Uses the standard two-tanh emptying curve parameterized by the shape
    fractions b and d and the most recent meal mass ``d_meal`` (mg). With no
    meal pending the stomach empties at k_max.
    """
    k_min, k_max = p["k_min"], p["k_max"]
    b, d = p["b"], p["d"]
    safe_d = jnp.where(d_meal > 0, d_meal, 1.0)
    alpha = 5.0 / (2.0 * safe_d * (1.0 - b))
    beta = 5.0 / (2.0 * safe_d * d)
    curve = k_min + (k_max - k_min) / 2.0 * (
        jnp.tanh(alpha * (q_sto - b * safe_d))
        - jnp.tanh(beta * (q_sto - d * safe_d)) + 2.0)
    curve = jnp.clip(curve, k_min, k_max)
    return jnp.where(d_meal > 0, curve, k_max)


def derivative_rates(x, insulin_rate, carb_rate, d_meal, p: Mapping[str, float],
                     risk_fn: Callable | None = None):
    """Time derivative of the 13-vector state.

    ``insulin_rate`` is in pmol/kg/min, ``carb_rate`` in mg/min, ``d_meal``
    the most recent meal mass in mg (drives the emptying curve).
    """
    q_sto1, q_sto2, q_gut = x[0], x[1], x[2]
    g_p, g_t, g_s = x[3], x[4], x[5]
    i_p, i_l, x_l, x_act, i_tilde = x[6], x[7], x[8], x[9], x[10]
    i_sc1, i_sc2 = x[11], x[12]

    q_sto = q_sto1 + q_sto2
    k_empt = gastric_emptying_rate(q_sto, d_meal, p)

    dq_sto1 = -p["k_gri"] * q_sto1 + carb_rate
    dq_sto2 = -k_empt * q_sto2 + p["k_gri"] * q_sto1
    dq_gut = -p["k_abs"] * q_gut + k_empt * q_sto2

    ra = p["f"] * p["k_abs"] * q_gut / p["BW"]
    glucose = g_p / p["V_G"]
    insulin = i_p / p["V_I"]

    egp = jnp.maximum(p["k_p1"] - p["k_p2"] * g_p - p["k_p3"] * x_l, 0.0)
    excretion = p["k_e1"] * jnp.maximum(g_p - p["k_e2"], 0.0)
    u_ii = p["F_snc"]
    risk = risk_fn(glucose) if risk_fn is not None else 0.0
    u_id = ((p["V_m0"] + p["V_mx"] * x_act * (1.0 + p["r_1"] * risk)) * g_t
            / (p["K_m0"] + g_t))

    dg_p = egp + ra - u_ii - excretion - p["k_1"] * g_p + p["k_2"] * g_t
    dg_t = -u_id + p["k_1"] * g_p - p["k_2"] * g_t
    dg_s = -p["k_sc"] * g_s + p["k_sc"] * g_p

    r_ai = p["k_a1"] * i_sc1 + p["k_a2"] * i_sc2
    di_p = -(p["m_2"] + p["m_4"]) * i_p + p["m_1"] * i_l + r_ai
    di_l = -(p["m_1"] + p["m_3"]) * i_l + p["m_2"] * i_p
    dx_l = -p["k_i"] * (x_l - i_tilde)
    # Insulin action is driven by the above-basal excess only; the floor keeps
    # the active-insulin compartment non-negative asymptotically.
    dx_act = -p["p_2U"] * x_act + p["p_2U"] * jnp.maximum(insulin - p["I_b"], 0.0)
    di_tilde = -p["k_i"] * (i_tilde - insulin)
    di_sc1 = -(p["k_d"] + p["k_a1"]) * i_sc1 + insulin_rate
    di_sc2 = p["k_d"] * i_sc1 - p["k_a2"] * i_sc2

    return jnp.stack([dq_sto1, dq_sto2, dq_gut, dg_p, dg_t, dg_s,
                      di_p, di_l, dx_l, dx_act, di_tilde, di_sc1, di_sc2])


def input_rates(u: ExogenousInput, bw: float, dt: float) -> tuple[float, float]:
    """Convert per-step amounts to (pmol/kg/min, mg/min) rates."""
    insulin_rate = u.insulin_units * PMOL_PER_UNIT / bw / dt
    carb_rate = u.carb_grams * MG_PER_G / dt
    return insulin_rate, carb_rate


def uva_derivative(x, u: ExogenousInput, p: Mapping[str, float],
                   d_meal: float = 0.0, dt: float = 5.0,
                   risk_fn: Callable | None = None) -> np.ndarray:
    """Public derivative evaluation on amount-based inputs."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        bad = STATE_FIELDS[int(np.argmax(~np.isfinite(x)))]
        raise StateValidityError(f"non-finite state component {bad!r}")
    insulin_rate, carb_rate = input_rates(u, p["BW"], dt)
    return np.asarray(derivative_rates(x, insulin_rate, carb_rate, d_meal, p,
                                       risk_fn=risk_fn))


def euler_substeps(x, insulin_rate, carb_rate, d_meal, p, dt: float,
                   n_sub: int, risk_fn: Callable | None = None):
    """Explicit Euler over ``n_sub`` substeps, clamping each to >= 0."""
    dt_sub = dt / n_sub
    for _ in range(n_sub):
        dx = derivative_rates(x, insulin_rate, carb_rate, d_meal, p,
                              risk_fn=risk_fn)
        x = jnp.maximum(x + dt_sub * dx, 0.0)
    return x


def merge_params(s: StaticParams | Mapping[str, float],
                 d: Mapping[str, float] | None = None) -> dict:
    p = s.as_dict() if isinstance(s, StaticParams) else dict(s)
    if d:
        unknown = set(d) - set(PARAM_FIELDS)
        if unknown:
            raise ValueError(f"unknown dynamic parameter keys: {sorted(unknown)}")
        p.update(d)
    return p


def uva_step(x: PhysioState, d: Mapping[str, float] | None, u: ExogenousInput,
             s: StaticParams, dt: float = 5.0, n_sub: int = 5,
             d_meal: float = 0.0, risk_fn: Callable | None = None) -> PhysioState:
    """Advance the state by ``dt`` minutes with Euler sub-stepping."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    arr = x.as_array() if isinstance(x, PhysioState) else np.asarray(x, float)
    if not np.all(np.isfinite(arr)):
        bad = STATE_FIELDS[int(np.argmax(~np.isfinite(arr)))]
        raise StateValidityError(f"non-finite state component {bad!r}")
    p = merge_params(s, d)
    insulin_rate, carb_rate = input_rates(u, p["BW"], dt)
    out = np.asarray(euler_substeps(arr, insulin_rate, carb_rate, d_meal, p,
                                    dt, n_sub, risk_fn=risk_fn))
    if not np.all(np.isfinite(out)):
        bad = STATE_FIELDS[int(np.argmax(~np.isfinite(out)))]
        raise DivergenceError(bad)
    return PhysioState.from_array(out)


def cgm_observe(x, s: StaticParams | Mapping[str, float]):
    """CGM emission: subcutaneous glucose mass divided by V_G (mg/dL)."""
    g_s = x.g_s if isinstance(x, PhysioState) else x[5]
    v_g = s.V_G if isinstance(s, StaticParams) else s["V_G"]
    return g_s / v_g


# ---------------------------------------------------------------------------
# Batched rollout (jit-compiled scan used by fitting, forecasting, synthesis)
# ---------------------------------------------------------------------------

@partial(jax.jit, static_argnames=("k_names", "n_sub"))
def _rollout(s_dict, d_seq, insulin_steps, carb_steps, x0, d_meal0,
             dt, k_names, n_sub):
    bw = s_dict["BW"]

    def body(carry, inp):
        x, d_meal = carry
        d_vals, ins_u, carb_g = inp
        d_meal = jnp.where(carb_g > 0, carb_g * MG_PER_G, d_meal)
        p = dict(s_dict)
        for i, name in enumerate(k_names):
            p[name] = d_vals[i]
        insulin_rate = ins_u * PMOL_PER_UNIT / bw / dt
        carb_rate = carb_g * MG_PER_G / dt
        x = euler_substeps(x, insulin_rate, carb_rate, d_meal, p, dt, n_sub)
        return (x, d_meal), x

    (_, _), states = jax.lax.scan(
        body, (x0, d_meal0), (d_seq, insulin_steps, carb_steps))
    return states


def run_schedule(s: StaticParams, insulin_steps, carb_steps,
                 d_seq=None, x0: PhysioState | None = None,
                 d_keys: tuple = DEFAULT_DYNAMIC_KEYS,
                 dt: float = 5.0, n_sub: int = 5,
                 d_meal0: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Simulate a whole input schedule; returns (states (T,13), cgm (T,)).

    ``d_seq`` is an optional (T, K) array of time-varying parameter values for
    ``d_keys``; when omitted the static values are used throughout.
    """
    insulin_steps = jnp.asarray(insulin_steps, dtype=jnp.float64)
    carb_steps = jnp.asarray(carb_steps, dtype=jnp.float64)
    T = insulin_steps.shape[0]
    if d_seq is None:
        d_seq = jnp.broadcast_to(jnp.asarray(dynamic_anchors(s, d_keys)),
                                 (T, len(d_keys)))
    else:
        d_seq = jnp.asarray(d_seq, dtype=jnp.float64)
    if x0 is None:
        x0 = steady_state(s)
    x0_arr = jnp.asarray(x0.as_array())
    states = _rollout(s.as_dict(), d_seq, insulin_steps, carb_steps, x0_arr,
                      float(d_meal0), float(dt), tuple(d_keys), int(n_sub))
    states = np.asarray(states)
    if not np.all(np.isfinite(states)):
        t_bad, i_bad = np.argwhere(~np.isfinite(states))[0]
        raise DivergenceError(STATE_FIELDS[i_bad],
                              f"divergence at step {t_bad} in "
                              f"{STATE_FIELDS[i_bad]!r}")
    return states, states[:, 5] / s.V_G


# ---------------------------------------------------------------------------
# Steady-state initialization
# ---------------------------------------------------------------------------

def _insulin_steady(p: dict, basal_rate: float) -> dict:
    inp = basal_rate * PMOL_PER_UNIT / p["BW"]  # pmol/kg/min
    i_sc1 = inp / (p["k_d"] + p["k_a1"])
    i_sc2 = p["k_d"] * i_sc1 / p["k_a2"]
    r_ai = p["k_a1"] * i_sc1 + p["k_a2"] * i_sc2
    denom = p["m_2"] + p["m_4"] - p["m_1"] * p["m_2"] / (p["m_1"] + p["m_3"])
    i_p = r_ai / denom
    i_l = p["m_2"] * i_p / (p["m_1"] + p["m_3"])
    insulin = i_p / p["V_I"]
    return {
        "i_p": i_p, "i_l": i_l, "x_l": insulin, "i_tilde": insulin,
        "x_act": max(insulin - p["I_b"], 0.0),
        "i_sc1": i_sc1, "i_sc2": i_sc2, "insulin": insulin,
    }


def _tissue_glucose(p: dict, g_p: float, x_act: float) -> float:
    # Solve -U_id + k_1 g_p - k_2 g_t = 0 for g_t.
    vm = p["V_m0"] + p["V_mx"] * x_act

    def h(g_t):
        return p["k_1"] * g_p - p["k_2"] * g_t - vm * g_t / (p["K_m0"] + g_t)

    hi = p["k_1"] * g_p / p["k_2"] + 1.0
    return brentq(h, 0.0, hi, xtol=1e-12)


def _plasma_residual(p: dict, g_p: float, ins: dict) -> float:
    egp = max(p["k_p1"] - p["k_p2"] * g_p - p["k_p3"] * ins["x_l"], 0.0)
    excretion = p["k_e1"] * max(g_p - p["k_e2"], 0.0)
    g_t = _tissue_glucose(p, g_p, ins["x_act"])
    return egp - p["F_snc"] - excretion - p["k_1"] * g_p + p["k_2"] * g_t


def _steady_for_basal(p: dict, basal_rate: float) -> PhysioState:
    ins = _insulin_steady(p, basal_rate)
    try:
        g_p = brentq(lambda g: _plasma_residual(p, g, ins), 1e-6, 5000.0,
                     xtol=1e-12)
    except ValueError as exc:
        raise InitializationError(
            "no glucose steady state for the given basal rate; "
            "review parameters") from exc
    g_t = _tissue_glucose(p, g_p, ins["x_act"])
    return PhysioState(
        q_sto1=0.0, q_sto2=0.0, q_gut=0.0, g_p=g_p, g_t=g_t, g_s=g_p,
        i_p=ins["i_p"], i_l=ins["i_l"], x_l=ins["x_l"], x_act=ins["x_act"],
        i_tilde=ins["i_tilde"], i_sc1=ins["i_sc1"], i_sc2=ins["i_sc2"])


def basal_for_target(s: StaticParams, target_glucose: float,
                     max_basal: float = 0.2) -> float:
    """Constant basal rate (U/min) whose steady glucose equals the target."""
    if target_glucose <= 0:
        raise ValueError("target_glucose must be positive")
    p = s.as_dict()

    def gap(basal):
        try:
            return cgm_observe(_steady_for_basal(p, basal), s) - target_glucose
        except InitializationError:
            # Glucose fully suppressed at this basal; treat as zero.
            return -target_glucose

    if gap(0.0) <= 0.0:
        # Target at or above the no-insulin steady glucose: the closest
        # achievable steady state is zero basal.
        return 0.0
    try:
        return brentq(gap, 0.0, max_basal, xtol=1e-12)
    except ValueError as exc:
        raise InitializationError(
            f"no basal rate in [0, {max_basal}] U/min reaches "
            f"{target_glucose} mg/dL; review parameters") from exc


def steady_state(s: StaticParams, basal_rate: float | None = None,
                 target_glucose: float = 120.0) -> PhysioState:
    """Fixed point of the dynamics under constant basal insulin.

    When ``basal_rate`` is omitted it is solved so that the steady CGM equals
    ``target_glucose``; when supplied, the fixed point under that basal is
    returned (its glucose is whatever the physiology dictates).
    """
    if basal_rate is None:
        basal_rate = basal_for_target(s, target_glucose)
    state = _steady_for_basal(s.as_dict(), basal_rate)
    state.validate()
    return state
