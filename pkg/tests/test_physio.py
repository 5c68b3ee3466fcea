"""Physiology core: derivative oracle, emptying curve, stepping, steady state."""

import math

import numpy as np
import pytest

from gludyn import physio
from gludyn.errors import DivergenceError, InitializationError, \
    StateValidityError


def oracle_derivative(x, insulin_rate, carb_rate, d_meal, p):
    """Independently coded derivative of the 13-state model (plain Python).

    Valid away from the EGP/excretion/insulin-action clamp boundaries.
    """
    (q_sto1, q_sto2, q_gut, g_p, g_t, g_s,
     i_p, i_l, x_l, x_act, i_tilde, i_sc1, i_sc2) = x
    q_sto = q_sto1 + q_sto2
    if d_meal > 0:
        alpha = 5.0 / (2.0 * d_meal * (1.0 - p["b"]))
        beta = 5.0 / (2.0 * d_meal * p["d"])
        k_empt = p["k_min"] + (p["k_max"] - p["k_min"]) / 2.0 * (
            math.tanh(alpha * (q_sto - p["b"] * d_meal))
            - math.tanh(beta * (q_sto - p["d"] * d_meal)) + 2.0)
        k_empt = min(max(k_empt, p["k_min"]), p["k_max"])
    else:
        k_empt = p["k_max"]
    ra = p["f"] * p["k_abs"] * q_gut / p["BW"]
    insulin = i_p / p["V_I"]
    egp = max(p["k_p1"] - p["k_p2"] * g_p - p["k_p3"] * x_l, 0.0)
    u_id = (p["V_m0"] + p["V_mx"] * x_act) * g_t / (p["K_m0"] + g_t)
    return np.array([
        -p["k_gri"] * q_sto1 + carb_rate,
        -k_empt * q_sto2 + p["k_gri"] * q_sto1,
        -p["k_abs"] * q_gut + k_empt * q_sto2,
        egp + ra - p["F_snc"] - p["k_e1"] * max(g_p - p["k_e2"], 0.0)
        - p["k_1"] * g_p + p["k_2"] * g_t,
        -u_id + p["k_1"] * g_p - p["k_2"] * g_t,
        -p["k_sc"] * g_s + p["k_sc"] * g_p,
        -(p["m_2"] + p["m_4"]) * i_p + p["m_1"] * i_l
        + p["k_a1"] * i_sc1 + p["k_a2"] * i_sc2,
        -(p["m_1"] + p["m_3"]) * i_l + p["m_2"] * i_p,
        -p["k_i"] * (x_l - i_tilde),
        -p["p_2U"] * x_act + p["p_2U"] * max(insulin - p["I_b"], 0.0),
        -p["k_i"] * (i_tilde - insulin),
        -(p["k_d"] + p["k_a1"]) * i_sc1 + insulin_rate,
        p["k_d"] * i_sc1 - p["k_a2"] * i_sc2,
    ])


class TestDerivative:
    def test_matches_oracle_on_random_states(self, params, steady, rng):
        p = params.as_dict()
        base = steady.as_array()
        for _ in range(50):
            x = base * rng.uniform(0.5, 1.5, size=13)
            x[:3] = rng.uniform(0, 30000, size=3)
            ins_rate = rng.uniform(0, 50)
            carb_rate = rng.uniform(0, 8000)
            d_meal = float(rng.uniform(10000, 80000))
            got = np.asarray(physio.derivative_rates(
                x, ins_rate, carb_rate, d_meal, p))
            want = oracle_derivative(x, ins_rate, carb_rate, d_meal, p)
            np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_meal_appearance_rate_frozen_example(self, params):
        # Ra = f * k_abs * Q_gut / BW with the default parameter set and
        # Q_gut = 200 mg: 0.9 * 0.057 * 200 / 75 = 0.1368 mg/kg/min,
        # entering the plasma-glucose derivative additively.
        p = params.as_dict()
        x = np.zeros(13)
        x[2] = 200.0
        base = np.asarray(physio.derivative_rates(np.zeros(13), 0, 0, 0, p))
        with_gut = np.asarray(physio.derivative_rates(x, 0, 0, 0, p))
        assert with_gut[3] - base[3] == pytest.approx(0.1368, abs=1e-12)

    def test_unit_conversions(self, params):
        ins_rate, carb_rate = physio.input_rates(
            physio.ExogenousInput(insulin_units=1.0, carb_grams=1.0),
            params.BW, 5.0)
        assert ins_rate == pytest.approx(6000.0 / 75.0 / 5.0)
        assert carb_rate == pytest.approx(1000.0 / 5.0)

    def test_rejects_non_finite_state(self, params):
        x = np.zeros(13)
        x[4] = np.nan
        with pytest.raises(StateValidityError, match="g_t"):
            physio.uva_derivative(x, physio.ExogenousInput(0, 0),
                                  params.as_dict())


class TestGastricEmptying:
    def test_frozen_midpoint_value(self, params):
        # Hand-evaluated two-tanh curve at q_sto = D/2 with D = 50 g:
        # alpha = 5/(2*50000*0.18), beta = 5/(2*50000*0.01);
        # tanh(alpha*(25000-41000)) = tanh(-4.4444) = -0.99972542...,
        # tanh(beta*24500) -> 1, giving k = 0.008 + 0.0239*(2 - 1.99972542)/1
        # Note (k_max-k_min)/2 = 0.0239.
        p = params.as_dict()
        got = float(physio.gastric_emptying_rate(25000.0, 50000.0, p))
        alpha = 5.0 / (2 * 50000 * (1 - 0.82))
        beta = 5.0 / (2 * 50000 * 0.01)
        want = 0.008 + 0.0239 * (math.tanh(alpha * (25000 - 41000))
                                 - math.tanh(beta * (25000 - 500)) + 2)
        assert got == pytest.approx(want, rel=1e-12)
        assert got == pytest.approx(0.00800656, abs=1e-7)

    def test_bounded_by_kmin_kmax(self, params, rng):
        p = params.as_dict()
        for _ in range(200):
            d = float(rng.uniform(1000, 100000))
            q = float(rng.uniform(0, 2 * d))
            k = float(physio.gastric_emptying_rate(q, d, p))
            assert p["k_min"] <= k <= p["k_max"]

    def test_full_and_empty_stomach_limits(self, params):
        # At a full stomach the curve sits at k_min + (k_max-k_min) *
        # (tanh(2.5) + 1) / 2, within about 1% of k_max.
        p = params.as_dict()
        assert float(physio.gastric_emptying_rate(50000.0, 50000.0, p)) == \
            pytest.approx(p["k_max"], rel=2e-2)
        assert float(physio.gastric_emptying_rate(0.0, 0.0, p)) == p["k_max"]


class TestStepping:
    def test_single_substep_is_explicit_euler(self, params, steady):
        # One substep must equal x + dt * f(x) exactly (then clamped).
        p = params.as_dict()
        x = steady.as_array()
        dt = 5.0
        got = np.asarray(physio.euler_substeps(x, 2.0, 100.0, 30000.0, p,
                                               dt, 1))
        want = x + dt * oracle_derivative(x, 2.0, 100.0, 30000.0, p)
        np.testing.assert_allclose(got, np.maximum(want, 0.0), rtol=1e-12)

    def test_substep_clamp_keeps_nonnegative(self, params):
        p = params.as_dict()
        x = np.zeros(13)
        x[3] = 0.01  # tiny plasma glucose; utilization would push negative
        out = np.asarray(physio.euler_substeps(x, 0.0, 0.0, 0.0, p, 5.0, 5))
        assert np.all(out >= 0.0)

    def test_uva_step_roundtrip_and_divergence(self, params, steady):
        out = physio.uva_step(steady, None, physio.ExogenousInput(0.0, 0.0),
                              params)
        assert isinstance(out, physio.PhysioState)
        bad = params.replace(k_1=1e6)  # far beyond the Euler stability limit
        x = steady
        with pytest.raises(DivergenceError):
            for _ in range(50):
                x = physio.uva_step(x, None, physio.ExogenousInput(0, 0), bad)

    def test_run_schedule_matches_stepwise(self, params, steady):
        insulin = np.array([0.02, 0.02, 5.0, 0.02, 0.02])
        carbs = np.array([0.0, 40.0, 0.0, 0.0, 0.0])
        states, cgm = physio.run_schedule(params, insulin, carbs, x0=steady)
        x = steady
        d_meal = 0.0
        for t in range(5):
            if carbs[t] > 0:
                d_meal = carbs[t] * physio.MG_PER_G
            x = physio.uva_step(x, None,
                                physio.ExogenousInput(insulin[t], carbs[t]),
                                params, d_meal=d_meal)
            np.testing.assert_allclose(states[t], x.as_array(), rtol=1e-9)
            assert cgm[t] == pytest.approx(physio.cgm_observe(x, params),
                                           rel=1e-9)


class TestSteadyState:
    def test_residual_below_tolerance(self, params):
        st = physio.steady_state(params, target_glucose=120.0)
        basal = physio.basal_for_target(params, 120.0)
        deriv = physio.uva_derivative(
            st.as_array(), physio.ExogenousInput(basal * 5.0, 0.0),
            params.as_dict())
        assert np.max(np.abs(deriv)) < 1e-6

    def test_target_is_hit(self, params):
        for target in (80.0, 120.0, 135.0):
            st = physio.steady_state(params, target_glucose=target)
            assert physio.cgm_observe(st, params) == pytest.approx(target,
                                                                   abs=1e-6)

    def test_unreachable_high_target_gives_zero_basal(self, params):
        assert physio.basal_for_target(params, 500.0) == 0.0

    def test_stationary_under_simulation(self, params):
        basal = physio.basal_for_target(params, 120.0)
        st = physio.steady_state(params, basal_rate=basal)
        insulin = np.full(100, basal * 5.0)
        _, cgm = physio.run_schedule(params, insulin, np.zeros(100), x0=st)
        assert np.max(np.abs(cgm - 120.0)) < 0.01

    def test_meal_and_bolus_directions(self, params):
        basal = physio.basal_for_target(params, 120.0)
        st = physio.steady_state(params, basal_rate=basal)
        n = 36
        insulin = np.full(n, basal * 5.0)
        carbs = np.zeros(n)
        carbs[0] = 50.0
        _, cgm_meal = physio.run_schedule(params, insulin, carbs, x0=st)
        assert cgm_meal.max() > 150.0
        ins_b = insulin.copy()
        ins_b[0] += 8.0
        _, cgm_bolus = physio.run_schedule(params, ins_b, np.zeros(n), x0=st)
        assert cgm_bolus.min() < 100.0


class TestStaticParams:
    def test_defaults_load_and_validate(self, params):
        d = params.as_dict()
        assert set(d) == set(physio.PARAM_FIELDS)
        assert all(np.isfinite(v) for v in d.values())

    def test_rejects_bad_values(self, params):
        with pytest.raises(ValueError):
            params.replace(V_G=-1.0)

    def test_json_roundtrip(self, params):
        restored = physio.StaticParams.from_json(params.to_json())
        assert restored.as_dict() == params.as_dict()

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ValueError):
            physio.StaticParams.from_dict({"nope": 1.0}, fill_defaults=True)

    def test_state_array_roundtrip(self, steady):
        arr = steady.as_array()
        assert arr.shape == (13,)
        assert physio.PhysioState.from_array(arr) == steady
