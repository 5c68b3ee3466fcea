"""Forecasting: bounds, common random numbers, cached evaluation path."""

import json

import numpy as np
import pytest

from gludyn import data, forecast, inference


@pytest.fixture(scope="module")
def fitted():
    series, truth = data.synthesize(days=2, seed=21)
    config = inference.FitConfig(max_iters=60, learning_rate=1e-3,
                                 patience=100, seed=0)
    result = inference.fit(series, config)
    return series, result


class TestPointForecast:
    def test_band_orders_and_shapes(self, fitted):
        series, result = fitted
        fc = forecast.Forecaster(result, series)
        req = forecast.ForecastRequest(anchor=150, horizon=24, n_samples=40)
        res = fc.point(req, seed=0)
        assert res.mean.shape == (24,)
        assert np.all(res.lo95 <= res.hi95)
        assert np.all(np.isfinite(res.mean))
        assert np.all((res.mean > 0) & (res.mean < 500))

    def test_mean_history_mode_shrinks_band(self, fitted):
        # Reusing posterior means for the history removes history noise, so
        # the predictive band cannot be wider on average.
        series, result = fitted
        fc = forecast.Forecaster(result, series)
        req = forecast.ForecastRequest(anchor=150, horizon=12, n_samples=60)
        full = fc.point(req, seed=0, history_mode="resample")
        mean = fc.point(req, seed=0, history_mode="mean")
        assert np.mean(mean.hi95 - mean.lo95) <= \
            np.mean(full.hi95 - full.lo95) + 1e-6

    def test_sample_path_finite(self, fitted):
        series, result = fitted
        fc = forecast.Forecaster(result, series)
        req = forecast.ForecastRequest(anchor=150, horizon=12)
        path = fc.sample(req, seed=3)
        assert path.shape == (12,)
        assert np.all(np.isfinite(path))

    def test_deterministic_given_seed(self, fitted):
        series, result = fitted
        fc = forecast.Forecaster(result, series)
        req = forecast.ForecastRequest(anchor=100, horizon=6, n_samples=20)
        a = fc.point(req, seed=9)
        b = fc.point(req, seed=9)
        np.testing.assert_array_equal(a.mean, b.mean)

    def test_request_validation(self):
        with pytest.raises(ValueError):
            forecast.ForecastRequest(anchor=5, horizon=0)
        with pytest.raises(ValueError):
            forecast.ForecastRequest(anchor=5, horizon=3, n_samples=0)


class TestCounterfactual:
    def test_meal_and_bolus_directions(self, fitted):
        series, result = fitted
        fc = forecast.Forecaster(result, series)
        basal = float(np.median(series.insulin))
        scen = forecast.meal_bolus_grid(basal, 36)
        base = forecast.ForecastRequest(anchor=150, horizon=36, n_samples=30)
        out = fc.counterfactual(base, scen, seed=2)
        ref = out["nomeal_nobolus"].mean[-1]
        assert out["meal_nobolus"].mean[-1] > ref
        assert out["nomeal_bolus"].mean[-1] < ref

    def test_common_random_numbers_cancel_noise(self, fitted):
        # Two identical scenarios under common random numbers must produce
        # identical forecasts.
        series, result = fitted
        fc = forecast.Forecaster(result, series)
        basal = float(np.median(series.insulin))
        ins = np.full(12, basal)
        scen = {"a": (ins, np.zeros(12)), "b": (ins.copy(), np.zeros(12))}
        base = forecast.ForecastRequest(anchor=150, horizon=12, n_samples=25)
        out = fc.counterfactual(base, scen, seed=5)
        np.testing.assert_array_equal(out["a"].mean, out["b"].mean)

    def test_scenario_loader(self, tmp_path):
        doc = {"snack": [[30, 20.0, 0.0]], "correction": [[15, 0.0, 2.0]]}
        path = tmp_path / "scen.json"
        path.write_text(json.dumps(doc))
        scen = forecast.load_scenarios(path, basal_per_step=0.05, horizon=12)
        ins, carbs = scen["snack"]
        assert carbs[6] == 20.0 and carbs.sum() == 20.0
        np.testing.assert_allclose(ins, 0.05)
        ins2, _ = scen["correction"]
        assert ins2[3] == pytest.approx(2.05)


class TestCachedForecaster:
    def test_matches_slow_path_at_posterior_mean(self, fitted):
        # The cached continuation must agree with a full-history mean-noise
        # forecast when the future carries no process noise.
        series, result = fitted
        cached = forecast.CachedStateForecaster(result, series)
        anchor, h = 120, 12
        fast = cached.point_path(anchor, h)

        fc = forecast.Forecaster(result, series)
        req = forecast.ForecastRequest(anchor=anchor, horizon=h, n_samples=1)
        import jax.numpy as jnp
        # zero etas + mean history mode = fully deterministic chain
        slow = fc._run(req, jnp.zeros((1, anchor + 2 + h,
                                       result.config.latent_dim)), "mean")
        np.testing.assert_allclose(fast, np.asarray(slow[0]), rtol=1e-8)

    def test_fitted_cgm_tracks_observations(self, fitted):
        series, result = fitted
        cached = forecast.CachedStateForecaster(result, series)
        resid = cached.fitted_cgm - series.cgm
        assert np.nanmean(np.abs(resid)) < 30.0

    def test_sampled_future_counterfactual_directions(self, fitted):
        series, result = fitted
        cached = forecast.CachedStateForecaster(result, series)
        basal = float(np.median(series.insulin))
        scen = forecast.meal_bolus_grid(basal, 24)
        out = cached.counterfactual(150, scen, h=24, n_samples=25, seed=1)
        ref = out["nomeal_nobolus"].mean[-1]
        assert out["meal_nobolus"].mean[-1] > ref
        assert out["nomeal_bolus"].mean[-1] < ref

    def test_sampled_future_crn_identical_for_equal_inputs(self, fitted):
        series, result = fitted
        cached = forecast.CachedStateForecaster(result, series)
        basal = float(np.median(series.insulin))
        ins = np.full(12, basal)
        scen = {"a": (ins, np.zeros(12)), "b": (ins.copy(), np.zeros(12))}
        out = cached.counterfactual(150, scen, h=12, n_samples=15, seed=3)
        np.testing.assert_array_equal(out["a"].mean, out["b"].mean)

    def test_zero_noise_future_matches_point_path(self, fitted):
        series, result = fitted
        cached = forecast.CachedStateForecaster(result, series)
        etas = np.zeros((1, 12, result.config.latent_dim))
        paths = cached.sample_future(140, 12, etas)
        np.testing.assert_allclose(paths[0], cached.point_path(140, 12),
                                   rtol=1e-10)

    def test_horizon_coverage_check(self, fitted):
        series, result = fitted
        cached = forecast.CachedStateForecaster(result, series)
        from gludyn.errors import ForecastError
        with pytest.raises(ForecastError):
            cached.point_path(len(series) - 3, 12)


class TestFutureInputs:
    def test_defaults_come_from_series(self, fitted):
        series, _ = fitted
        req = forecast.ForecastRequest(anchor=100, horizon=6)
        ins, carbs = forecast.future_inputs(series, req)
        np.testing.assert_array_equal(ins, series.insulin[101:107])
        np.testing.assert_array_equal(carbs, series.carbs[101:107])

    def test_beyond_series_uses_basal(self, fitted):
        series, _ = fitted
        req = forecast.ForecastRequest(anchor=len(series) - 2, horizon=6)
        ins, carbs = forecast.future_inputs(series, req, basal_per_step=0.07)
        np.testing.assert_allclose(ins, 0.07)
        np.testing.assert_array_equal(carbs, 0.0)

    def test_future_covariates_shape(self, fitted):
        series, _ = fitted
        cov = forecast.future_covariates(series, 200, 24)
        assert cov.shape == (24, 5)
        assert np.all(np.isfinite(cov))
