"""Ingestion of raw event data onto the 5-minute grid, plus synthetic data.

Timestamps are stored as UTC epoch seconds with an explicit timezone offset
so diurnal covariates can be computed on the local clock. CGM values are
linearly interpolated to grid points; insulin, carbohydrate, and energy
events are summed into the covering step and never interpolated.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone

import numpy as np

from .errors import GludynError
from . import physio

STEP_MINUTES = 5
STEP_SECONDS = STEP_MINUTES * 60
STEPS_PER_DAY = 1440 // STEP_MINUTES


@dataclass
class RawEventLog:
    """Irregularly timestamped events, one array pair (or triple) per kind."""

    cgm_times: np.ndarray       # epoch seconds
    cgm_values: np.ndarray      # mg/dL
    insulin_times: np.ndarray
    insulin_values: np.ndarray  # U
    insulin_is_bolus: np.ndarray
    carb_times: np.ndarray
    carb_values: np.ndarray     # g
    energy_times: np.ndarray
    energy_values: np.ndarray   # METs

    def __post_init__(self):
        for name in ("cgm", "insulin", "carb", "energy"):
            t = np.asarray(getattr(self, f"{name}_times"), dtype=np.int64)
            v = np.asarray(getattr(self, f"{name}_values"), dtype=np.float64)
            if np.any(np.diff(t) <= 0):
                raise ValueError(f"{name} timestamps must be strictly increasing")
            if not np.all(np.isfinite(v)) or np.any(v < 0):
                raise ValueError(f"{name} values must be finite and non-negative")
            setattr(self, f"{name}_times", t)
            setattr(self, f"{name}_values", v)
        if np.any(self.cgm_values <= 0):
            raise ValueError("CGM values must be positive")
        self.insulin_is_bolus = np.asarray(self.insulin_is_bolus, dtype=bool)


@dataclass
class GriddedSeries:
    """5-minute-aligned multichannel series with gap annotations."""

    start_epoch: int                 # UTC epoch seconds, 5-min aligned
    tz_offset_minutes: int
    cgm: np.ndarray                  # mg/dL; NaN marks missing
    insulin: np.ndarray              # per-step U (basal + bolus)
    bolus: np.ndarray                # per-step bolus U (subset of insulin)
    carbs: np.ndarray                # per-step g
    energy: np.ndarray               # per-step METs
    interpolated: np.ndarray = field(default=None)
    step_minutes: int = STEP_MINUTES

    def __post_init__(self):
        self.cgm = np.asarray(self.cgm, dtype=np.float64)
        n = len(self.cgm)
        for name in ("insulin", "bolus", "carbs", "energy"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if len(arr) != n:
                raise ValueError("channel lengths must match")
            setattr(self, name, arr)
        if self.interpolated is None:
            self.interpolated = np.zeros(n, dtype=bool)
        else:
            self.interpolated = np.asarray(self.interpolated, dtype=bool)

    def __len__(self) -> int:
        return len(self.cgm)

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.cgm)

    @property
    def observed(self) -> np.ndarray:
        return ~self.missing

    def times(self) -> np.ndarray:
        return self.start_epoch + STEP_SECONDS * np.arange(len(self))

    def tod_minutes(self) -> np.ndarray:
        local = self.times() + 60 * self.tz_offset_minutes
        return (local % 86400) / 60.0

    def slice(self, lo: int, hi: int) -> "GriddedSeries":
        return replace(
            self,
            start_epoch=int(self.start_epoch + STEP_SECONDS * lo),
            cgm=self.cgm[lo:hi], insulin=self.insulin[lo:hi],
            bolus=self.bolus[lo:hi], carbs=self.carbs[lo:hi],
            energy=self.energy[lo:hi], interpolated=self.interpolated[lo:hi])

    def fingerprint(self) -> dict:
        h = hashlib.sha256()
        for arr in (self.cgm, self.insulin, self.carbs, self.energy):
            h.update(np.round(np.nan_to_num(arr, nan=-1.0), 6).tobytes())
        return {"start_epoch": int(self.start_epoch), "length": len(self),
                "channel_hash": h.hexdigest()}


def _align(epoch: int) -> int:
    if epoch % STEP_SECONDS:
        raise ValueError("timestamp must be aligned to the 5-minute grid")
    return int(epoch)


def resample_to_grid(log: RawEventLog, start: int, end: int,
                     tz_offset_minutes: int = 0,
                     max_gap_minutes: float = 60.0) -> GriddedSeries:
    """Grid an event log onto [start, end) at 5-minute resolution.

    CGM is linearly interpolated between neighboring readings; a grid point
    with no reading within ``max_gap_minutes`` on either side is marked
    missing. Dose/meal/energy events are summed into the step covering them
    (step t covers (t - 5min, t]).
    """
    start, end = _align(start), _align(end)
    if start >= end:
        raise ValueError("start must precede end")
    if len(log.cgm_times) == 0:
        raise GludynError("empty event log")
    grid = np.arange(start, end, STEP_SECONDS, dtype=np.int64)

    cgm = np.interp(grid, log.cgm_times, log.cgm_values,
                    left=np.nan, right=np.nan)
    # Mark points whose nearest flanking readings are too far away.
    idx = np.searchsorted(log.cgm_times, grid)
    prev = np.where(idx > 0, log.cgm_times[np.maximum(idx - 1, 0)], -np.inf)
    nxt = np.where(idx < len(log.cgm_times),
                   log.cgm_times[np.minimum(idx, len(log.cgm_times) - 1)],
                   np.inf)
    exact = np.isin(grid, log.cgm_times)
    gap_ok = (grid - prev <= max_gap_minutes * 60) & \
             (nxt - grid <= max_gap_minutes * 60)
    cgm = np.where(exact | gap_ok, cgm, np.nan)

    def bin_sum(times, values, mask=None):
        out = np.zeros(len(grid))
        if len(times) == 0:
            return out
        if mask is not None:
            times, values = times[mask], values[mask]
        # event at time s lands in the step with grid time ceil(s).
        pos = np.searchsorted(grid, times, side="left")
        ok = (pos >= 0) & (pos < len(grid)) & (times > start - STEP_SECONDS)
        np.add.at(out, pos[ok], values[ok])
        return out

    insulin = bin_sum(log.insulin_times, log.insulin_values)
    bolus = bin_sum(log.insulin_times, log.insulin_values, log.insulin_is_bolus)
    carbs = bin_sum(log.carb_times, log.carb_values)
    energy = bin_sum(log.energy_times, log.energy_values)
    return GriddedSeries(start_epoch=start, tz_offset_minutes=tz_offset_minutes,
                         cgm=cgm, insulin=insulin, bolus=bolus, carbs=carbs,
                         energy=energy)


def interpolate_gaps(series: GriddedSeries,
                     max_gap_minutes: float = 60.0) -> tuple[GriddedSeries, dict]:
    """Linearly fill interior CGM gaps no longer than ``max_gap_minutes``.

    Filled values are convex combinations of the flanking observations, so
    they stay within the neighbors' range. Leading/trailing gaps and gaps
    longer than the limit remain missing.
    """
    cgm = series.cgm.copy()
    obs = np.flatnonzero(~np.isnan(cgm))
    if len(obs) < 2:
        raise GludynError("need at least two observed CGM points")
    filled = np.zeros(len(cgm), dtype=bool)
    max_steps = int(max_gap_minutes / series.step_minutes)
    for lo, hi in zip(obs[:-1], obs[1:]):
        if hi - lo <= 1 or hi - lo > max_steps:
            continue
        frac = np.arange(1, hi - lo) / (hi - lo)
        cgm[lo + 1:hi] = (1 - frac) * cgm[lo] + frac * cgm[hi]
        filled[lo + 1:hi] = True
    out = replace(series, cgm=cgm,
                  interpolated=series.interpolated | filled)
    report = {"filled_steps": int(filled.sum()),
              "filled_fraction": float(filled.sum() / len(cgm)),
              "remaining_missing": int(np.isnan(cgm).sum())}
    return out, report


def _first_midnight_index(series: GriddedSeries) -> int:
    tod = series.tod_minutes()
    at_midnight = np.flatnonzero(tod == 0.0)
    if len(at_midnight) == 0:
        raise GludynError("series does not contain a local midnight")
    return int(at_midnight[0])


def split(series: GriddedSeries, train_days: int = 90, valid_days: int = 30,
          test_days: int = 31) -> tuple[GriddedSeries, GriddedSeries, GriddedSeries]:
    """Contiguous train/validation/test splits with midnight boundaries."""
    first = _first_midnight_index(series)
    need = (train_days + valid_days + test_days) * STEPS_PER_DAY
    if len(series) - first < need:
        raise GludynError(
            f"series too short: need {need} steps from the first midnight, "
            f"have {len(series) - first}")
    b1 = first + train_days * STEPS_PER_DAY
    b2 = b1 + valid_days * STEPS_PER_DAY
    b3 = b2 + test_days * STEPS_PER_DAY
    return series.slice(first, b1), series.slice(b1, b2), series.slice(b2, b3)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def synthesize(s_true: physio.StaticParams | None = None,
               days: int = 14,
               seed: int = 0,
               sigma_true: float = 5.0,
               vmx_amplitude: float = 0.3,
               vmx_phase_hours: float = 4.0,
               target_glucose: float = 120.0,
               carb_ratio: float = 10.0,
               meals_per_day: int = 3,
               gap_fraction: float = 0.0,
               start_epoch: int = 1700000000 - (1700000000 % 86400),
               tz_offset_minutes: int = 0,
               d_keys: tuple = physio.DEFAULT_DYNAMIC_KEYS,
               ) -> tuple[GriddedSeries, dict]:
    """Simulate the full generative pipeline with a diurnal sensitivity cycle.

    Insulin sensitivity (V_mx) follows a smooth sinusoid with the given
    relative amplitude; meals arrive around breakfast/lunch/dinner with
    jittered times and masses, each with a proportional bolus. Returns the
    observed series plus a ground-truth record (hidden parameter trajectory,
    full state path, noiseless CGM, basal rate).
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    s = s_true if s_true is not None else physio.default_params()
    rng = np.random.default_rng(seed)
    T = days * STEPS_PER_DAY
    tod = (np.arange(T) * STEP_MINUTES) % 1440.0

    basal = physio.basal_for_target(s, target_glucose)
    x0 = physio.steady_state(s, basal_rate=basal)

    anchors = physio.dynamic_anchors(s, d_keys)
    d_seq = np.tile(anchors, (T, 1))
    if "V_mx" in d_keys and vmx_amplitude != 0.0:
        i = d_keys.index("V_mx")
        phase = 2.0 * np.pi * (tod / 1440.0 - vmx_phase_hours / 24.0)
        d_seq[:, i] = anchors[i] * (1.0 + vmx_amplitude * np.sin(phase))

    insulin = np.full(T, basal * STEP_MINUTES)
    bolus = np.zeros(T)
    carbs = np.zeros(T)
    meal_hours = np.linspace(7.5, 18.5, meals_per_day)
    for day in range(days):
        for hour in meal_hours:
            t = day * STEPS_PER_DAY + int(round(hour * 12)) \
                + int(rng.integers(-9, 10))
            if not (0 <= t < T):
                continue
            grams = float(rng.uniform(30.0, 80.0))
            carbs[t] += grams
            dose = grams / carb_ratio
            bolus[t] += dose
            insulin[t] += dose

    states, cgm_clean = physio.run_schedule(
        s, insulin, carbs, d_seq=d_seq, x0=x0, d_keys=d_keys)
    cgm = cgm_clean + rng.normal(0.0, sigma_true, size=T)

    # Mild diurnal activity pattern for the energy channel.
    energy = np.maximum(
        0.0, 1.2 + np.sin(2 * np.pi * (tod - 900.0) / 1440.0)
        + 0.3 * rng.standard_normal(T))

    interpolated = np.zeros(T, dtype=bool)
    if gap_fraction > 0:
        n_gaps = max(1, int(gap_fraction * T / 4))
        for _ in range(n_gaps):
            at = int(rng.integers(1, T - 5))
            cgm[at:at + int(rng.integers(1, 5))] = np.nan

    series = GriddedSeries(start_epoch=int(start_epoch),
                           tz_offset_minutes=tz_offset_minutes,
                           cgm=cgm, insulin=insulin, bolus=bolus,
                           carbs=carbs, energy=energy,
                           interpolated=interpolated)
    truth = {"d_seq": d_seq, "d_keys": tuple(d_keys), "states": states,
             "cgm_clean": cgm_clean, "basal_rate": basal,
             "sigma_true": sigma_true, "x0": x0, "params": s}
    return series, truth


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

_GRID_COLUMNS = ("timestamp", "cgm", "insulin", "bolus", "carbs", "energy",
                 "missing", "interpolated")


def _iso(epoch: int) -> str:
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime(
        "%Y-%m-%dT%H:%M:%SZ")


def _from_iso(text: str) -> int:
    return int(datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ")
               .replace(tzinfo=timezone.utc).timestamp())


def write_gridded_csv(series: GriddedSeries, path) -> None:
    times = series.times()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_GRID_COLUMNS + (f"tz_offset_minutes={series.tz_offset_minutes}",))
        for i in range(len(series)):
            cgm = "" if np.isnan(series.cgm[i]) else f"{series.cgm[i]:.6f}"
            w.writerow([
                _iso(times[i]), cgm,
                f"{series.insulin[i]:.6f}", f"{series.bolus[i]:.6f}",
                f"{series.carbs[i]:.6f}", f"{series.energy[i]:.6f}",
                int(np.isnan(series.cgm[i])), int(series.interpolated[i])])


def read_gridded_csv(path) -> GriddedSeries:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if tuple(header[:len(_GRID_COLUMNS)]) != _GRID_COLUMNS:
        raise GludynError(f"unexpected gridded CSV header in {path}")
    tz = 0
    if len(header) > len(_GRID_COLUMNS) and "=" in header[-1]:
        tz = int(header[-1].split("=")[1])
    times = np.array([_from_iso(r[0]) for r in body], dtype=np.int64)
    cgm = np.array([float(r[1]) if r[1] else np.nan for r in body])
    cols = {name: np.array([float(r[j]) for r in body])
            for j, name in ((2, "insulin"), (3, "bolus"), (4, "carbs"),
                            (5, "energy"))}
    interp = np.array([bool(int(r[7])) for r in body])
    return GriddedSeries(start_epoch=int(times[0]), tz_offset_minutes=tz,
                         cgm=cgm, interpolated=interp, **cols)


def read_event_csv(path, kinds: bool = False):
    """Event CSV: iso8601_timestamp, value[, tag]."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    times = np.array([_from_iso(r[0]) for r in body], dtype=np.int64)
    values = np.array([float(r[1]) for r in body])
    if kinds:
        tags = np.array([r[2].strip().lower() == "bolus" for r in body])
        return times, values, tags
    return times, values


def write_event_csv(path, times, values, tags=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iso8601_timestamp", "value"] + (["tag"] if tags is not None else []))
        for i, (t, v) in enumerate(zip(times, values)):
            row = [_iso(t), f"{v:.6f}"]
            if tags is not None:
                row.append("bolus" if tags[i] else "basal")
            w.writerow(row)


def read_raw_logs(cgm_path, insulin_path, carb_path, energy_path) -> RawEventLog:
    ct, cv = read_event_csv(cgm_path)
    it, iv, ib = read_event_csv(insulin_path, kinds=True)
    mt, mv = read_event_csv(carb_path)
    et, ev = read_event_csv(energy_path)
    return RawEventLog(cgm_times=ct, cgm_values=cv, insulin_times=it,
                       insulin_values=iv, insulin_is_bolus=ib,
                       carb_times=mt, carb_values=mv,
                       energy_times=et, energy_values=ev)
