"""Data pipeline: gridding, interpolation, splits, synthesis, CSV round trips."""

import numpy as np
import pytest

from gludyn import data, physio
from gludyn.errors import GludynError

DAY = 86400
STEP = data.STEP_SECONDS


def make_log(rng, hours=8, start=0):
    n = hours * 12
    times = start + STEP * np.arange(n) + rng.integers(-60, 60, size=n)
    times = np.sort(times)
    times += np.arange(n)  # strictly increasing
    cgm = 120 + 30 * np.sin(np.arange(n) / 20)
    return data.RawEventLog(
        cgm_times=times, cgm_values=cgm,
        insulin_times=np.array([start + 3600]),
        insulin_values=np.array([2.5]),
        insulin_is_bolus=np.array([True]),
        carb_times=np.array([start + 3600]), carb_values=np.array([40.0]),
        energy_times=np.array([], dtype=float),
        energy_values=np.array([], dtype=float))


class TestResample:
    def test_event_sums_preserved_exactly(self, rng):
        log = make_log(rng)
        series = data.resample_to_grid(log, 0, 8 * 3600)
        assert series.insulin.sum() == 2.5
        assert series.carbs.sum() == 40.0
        assert series.bolus.sum() == 2.5

    def test_events_never_interpolated(self, rng):
        log = make_log(rng)
        series = data.resample_to_grid(log, 0, 8 * 3600)
        assert np.count_nonzero(series.insulin) == 1
        assert np.count_nonzero(series.carbs) == 1

    def test_event_lands_in_covering_step(self, rng):
        # An event at t belongs to the grid step (t - 300, t].
        log = make_log(rng)
        series = data.resample_to_grid(log, 0, 8 * 3600)
        idx = np.flatnonzero(series.carbs)[0]
        t_lo = series.start_epoch + STEP * (idx - 1)
        assert t_lo < 3600 <= t_lo + STEP

    def test_cgm_gap_masking(self, rng):
        log = make_log(rng)
        keep = (log.cgm_times < 2 * 3600) | (log.cgm_times > 4 * 3600)
        log = data.RawEventLog(
            cgm_times=log.cgm_times[keep], cgm_values=log.cgm_values[keep],
            insulin_times=log.insulin_times, insulin_values=log.insulin_values,
            insulin_is_bolus=log.insulin_is_bolus, carb_times=log.carb_times,
            carb_values=log.carb_values, energy_times=log.energy_times,
            energy_values=log.energy_values)
        series = data.resample_to_grid(log, 0, 8 * 3600, max_gap_minutes=60)
        gap = series.missing[25:47]
        assert gap.any()

    def test_rejects_unsorted_times(self):
        with pytest.raises(ValueError):
            data.RawEventLog(
                cgm_times=np.array([10.0, 5.0]),
                cgm_values=np.array([100.0, 100.0]),
                insulin_times=np.array([]), insulin_values=np.array([]),
                insulin_is_bolus=np.array([], dtype=bool),
                carb_times=np.array([]), carb_values=np.array([]),
                energy_times=np.array([]), energy_values=np.array([]))


class TestInterpolation:
    def make_gappy(self, rng, n=400, gap_at=100, gap_len=6):
        cgm = 120 + 25 * np.sin(np.arange(n) / 15.0) + rng.normal(0, 2, n)
        cgm[gap_at:gap_at + gap_len] = np.nan
        return data.GriddedSeries(
            start_epoch=0, tz_offset_minutes=0, cgm=cgm,
            insulin=np.zeros(n), bolus=np.zeros(n), carbs=np.zeros(n),
            energy=np.zeros(n))

    def test_fill_is_bounded_by_flanks(self, rng):
        # Property sweep: every filled value lies between the two flanking
        # observations (linear interpolation is a convex combination).
        for trial in range(200):
            r = np.random.default_rng(trial)
            gap_at = int(r.integers(10, 350))
            gap_len = int(r.integers(1, 12))
            series = self.make_gappy(r, gap_at=gap_at, gap_len=gap_len)
            filled, rep = data.interpolate_gaps(series)
            lo = min(series.cgm[gap_at - 1], series.cgm[gap_at + gap_len])
            hi = max(series.cgm[gap_at - 1], series.cgm[gap_at + gap_len])
            seg = filled.cgm[gap_at:gap_at + gap_len]
            assert np.all(seg >= lo - 1e-12) and np.all(seg <= hi + 1e-12)
            assert rep["filled_steps"] == gap_len

    def test_long_gaps_left_missing(self, rng):
        series = self.make_gappy(rng, gap_at=50, gap_len=20)
        filled, rep = data.interpolate_gaps(series, max_gap_minutes=60)
        assert np.isnan(filled.cgm[55])
        assert rep["filled_steps"] == 0

    def test_marks_interpolated_flags(self, rng):
        series = self.make_gappy(rng)
        filled, _ = data.interpolate_gaps(series)
        assert filled.interpolated[100:106].all()
        assert not filled.interpolated[99]

    def test_observed_values_untouched(self, rng):
        series = self.make_gappy(rng)
        filled, _ = data.interpolate_gaps(series)
        keep = series.observed
        np.testing.assert_array_equal(filled.cgm[keep], series.cgm[keep])


class TestSplit:
    def test_day_arithmetic(self):
        n = 10 * data.STEPS_PER_DAY
        series = data.GriddedSeries(
            start_epoch=0, tz_offset_minutes=0,
            cgm=np.full(n, 120.0), insulin=np.zeros(n), bolus=np.zeros(n),
            carbs=np.zeros(n), energy=np.zeros(n))
        tr, va, te = data.split(series, train_days=5, valid_days=3,
                                test_days=2)
        assert (len(tr), len(va), len(te)) == (5 * 288, 3 * 288, 2 * 288)
        assert va.start_epoch == tr.start_epoch + 5 * DAY
        assert te.start_epoch == va.start_epoch + 3 * DAY

    def test_boundaries_at_local_midnight(self):
        n = 11 * data.STEPS_PER_DAY
        series = data.GriddedSeries(
            start_epoch=3 * 3600, tz_offset_minutes=-120,
            cgm=np.full(n, 120.0), insulin=np.zeros(n), bolus=np.zeros(n),
            carbs=np.zeros(n), energy=np.zeros(n))
        tr, va, te = data.split(series, 5, 3, 2)
        for part in (tr, va, te):
            assert part.tod_minutes()[0] == 0.0

    def test_insufficient_data_raises(self):
        n = 3 * data.STEPS_PER_DAY
        series = data.GriddedSeries(
            start_epoch=0, tz_offset_minutes=0, cgm=np.full(n, 120.0),
            insulin=np.zeros(n), bolus=np.zeros(n), carbs=np.zeros(n),
            energy=np.zeros(n))
        with pytest.raises(GludynError):
            data.split(series, 5, 3, 2)


class TestSynthesize:
    def test_shapes_and_channels(self, short_series):
        series, truth = short_series
        assert len(series) == 2 * data.STEPS_PER_DAY
        assert truth["d_seq"].shape == (len(series), 3)
        assert series.carbs.sum() > 0
        assert series.insulin.sum() > 0

    def test_vmx_modulation_band(self, short_series):
        series, truth = short_series
        vmx = truth["d_seq"][:, truth["d_keys"].index("V_mx")]
        base = physio.default_params().V_mx
        assert np.isclose(vmx.max(), base * 1.3, rtol=1e-6)
        assert np.isclose(vmx.min(), base * 0.7, rtol=1e-6)

    def test_noise_level(self, short_series):
        series, truth = short_series
        resid = series.cgm - truth["cgm_clean"]
        assert 3.5 < np.std(resid[np.isfinite(resid)]) < 6.5

    def test_deterministic_given_seed(self):
        a, _ = data.synthesize(days=1, seed=5)
        b, _ = data.synthesize(days=1, seed=5)
        np.testing.assert_array_equal(a.cgm, b.cgm)
        c, _ = data.synthesize(days=1, seed=6)
        assert not np.array_equal(a.cgm, c.cgm)

    def test_bolus_matches_carb_ratio(self):
        series, truth = data.synthesize(days=2, seed=9, carb_ratio=10.0)
        meal_idx = np.flatnonzero(series.carbs)
        for i in meal_idx:
            assert series.bolus[i] == pytest.approx(series.carbs[i] / 10.0)

    def test_gap_fraction_drops_samples(self):
        series, _ = data.synthesize(days=2, seed=3, gap_fraction=0.1)
        frac = series.missing.mean()
        assert 0.02 < frac < 0.25

    def test_starts_at_local_midnight(self, short_series):
        series, _ = short_series
        assert series.tod_minutes()[0] == 0.0


class TestCsvRoundTrip:
    def test_gridded_roundtrip(self, tmp_path, short_series):
        series, _ = short_series
        path = tmp_path / "series.csv"
        data.write_gridded_csv(series, path)
        back = data.read_gridded_csv(path)
        assert back.start_epoch == series.start_epoch
        assert back.tz_offset_minutes == series.tz_offset_minutes
        np.testing.assert_allclose(back.cgm, series.cgm, atol=1e-4)
        np.testing.assert_allclose(back.insulin, series.insulin, atol=1e-6)
        np.testing.assert_allclose(back.carbs, series.carbs, atol=1e-6)

    def test_event_roundtrip(self, tmp_path):
        path = tmp_path / "events.csv"
        times = np.array([0, 300, 900])
        values = np.array([1.5, 0.0, 3.25])
        data.write_event_csv(path, times, values)
        t, v = data.read_event_csv(path)
        np.testing.assert_array_equal(t, times)
        np.testing.assert_allclose(v, values)

    def test_fingerprint_detects_changes(self, short_series):
        series, _ = short_series
        fp1 = series.fingerprint()
        other = series.slice(0, len(series))
        other.cgm[5] += 1.0
        assert other.fingerprint()["channel_hash"] != fp1["channel_hash"]
