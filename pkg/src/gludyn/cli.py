"""Command-line interface: synthesize data, fit, forecast, evaluate, and
render counterfactual scenarios.

Every command writes its outputs (CSV tables, PNG figures, and a run.json
recording the package version, seed, and fully resolved configuration) into
the directory given by --out.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__, baselines, data, forecast, inference, metrics, \
    physio, report
from .errors import ConfigError, GludynError

STEP_SECONDS = data.STEP_SECONDS


def _fail(exc: Exception) -> "NoReturn":
    click.echo(f"error: {exc}", err=True)
    sys.exit(1)


def _write_run_meta(out: Path, command: str, seed, config: dict) -> None:
    meta = {"package": "gludyn", "version": __version__, "command": command,
            "seed": seed, "config": config}
    (out / "run.json").write_text(json.dumps(meta, indent=2, default=str)
                                  + "\n")


def _load_fit_config(path: str | None, seed: int | None) -> inference.FitConfig:
    allowed = {f.name for f in dataclasses.fields(inference.FitConfig)}
    overrides = {}
    if path:
        with open(path) as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ConfigError("config file must contain a JSON object")
        unknown = set(doc) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}; "
                              f"allowed: {sorted(allowed)}")
        overrides = doc
    if seed is not None:
        overrides["seed"] = seed
    for key in ("d_keys", "fit_static_keys"):
        if key in overrides:
            overrides[key] = tuple(overrides[key])
    try:
        return inference.FitConfig(**overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _times(series, anchor: int, h: int) -> list[str]:
    base = series.start_epoch + (anchor + 1) * STEP_SECONDS
    return [data._iso(base + i * STEP_SECONDS) for i in range(h)]


def _write_forecast_csv(path, times, result: forecast.ForecastResult,
                        scenario: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["iso8601_timestamp", "mean_mgdl", "lo95_mgdl", "hi95_mgdl"]
        if scenario is not None:
            head = ["scenario"] + head
        w.writerow(head)
        for i, t in enumerate(times):
            row = [t, f"{result.mean[i]:.4f}", f"{result.lo95[i]:.4f}",
                   f"{result.hi95[i]:.4f}"]
            if scenario is not None:
                row = [scenario] + row
            w.writerow(row)


@click.group()
@click.version_option(__version__)
def main() -> None:
    """Glucose dynamics modeling: simulation, inference, forecasting."""


@main.command()
@click.option("--days", default=14, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--gap-fraction", default=0.0, show_default=True,
              help="Fraction of CGM samples dropped in contiguous gaps.")
@click.option("--sigma", default=5.0, show_default=True,
              help="Observation noise (mg/dL).")
@click.option("--out", required=True, type=click.Path())
def synth(days, seed, gap_fraction, sigma, out):
    """Generate a synthetic subject and write series.csv + overview figure."""
    try:
        out = _out_dir(out)
        series, truth = data.synthesize(days=days, seed=seed,
                                        sigma_true=sigma,
                                        gap_fraction=gap_fraction)
        data.write_gridded_csv(series, out / "series.csv")
        report.series_overview_figure(out / "series.png", series)
        summary = {"days": days, "sigma_true": truth["sigma_true"],
                   "basal_rate": truth["basal_rate"],
                   "n_steps": len(series),
                   "n_missing": int((~series.observed).sum())}
        (out / "truth.json").write_text(json.dumps(summary, indent=2) + "\n")
        _write_run_meta(out, "synth", seed,
                        {"days": days, "gap_fraction": gap_fraction,
                         "sigma": sigma})
        click.echo(f"wrote {out / 'series.csv'} ({len(series)} steps)")
    except GludynError as exc:
        _fail(exc)


@main.command()
@click.option("--data", "data_path", required=True,
              type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--max-gap-minutes", default=60.0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def fit(data_path, config_path, seed, max_gap_minutes, out):
    """Fit the dynamic model to a gridded series; writes checkpoint.json."""
    try:
        out = _out_dir(out)
        series = data.read_gridded_csv(data_path)
        series, gap_report = data.interpolate_gaps(series, max_gap_minutes)
        config = _load_fit_config(config_path, seed)
        result = inference.fit(series, config)
        inference.save_checkpoint(result, out / "checkpoint.json")
        report.loss_trace_figure(out / "loss.png", result.loss_trace)
        _write_run_meta(out, "fit", config.seed,
                        dataclasses.asdict(config) | {"gaps": gap_report})
        click.echo(f"fit complete: {result.n_iters} iterations, final loss "
                   f"{result.loss_trace[-1]:.2f}, sigma {result.sigma:.2f}")
        click.echo(f"wrote {out / 'checkpoint.json'}")
    except GludynError as exc:
        _fail(exc)


@main.command("forecast")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True,
              type=click.Path(exists=True))
@click.option("--anchor", required=True, type=int,
              help="Grid index of the last observed step.")
@click.option("--horizon", default=36, show_default=True,
              help="Steps ahead (5-minute units).")
@click.option("--samples", default=200, show_default=True)
@click.option("--history-mode", default="resample", show_default=True,
              type=click.Choice(["resample", "mean"]))
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def forecast_cmd(checkpoint, data_path, anchor, horizon, samples,
                 history_mode, seed, out):
    """Posterior-predictive forecast from an anchor time."""
    try:
        out = _out_dir(out)
        series = data.read_gridded_csv(data_path)
        series, _ = data.interpolate_gaps(series)
        result = inference.load_checkpoint(checkpoint)
        fc = forecast.Forecaster(result, series)
        req = forecast.ForecastRequest(anchor=anchor, horizon=horizon,
                                       n_samples=samples)
        res = fc.point(req, seed=seed, history_mode=history_mode)
        times = _times(series, anchor, horizon)
        _write_forecast_csv(out / "forecast.csv", times, res)
        report.forecast_band_figure(out / "forecast.png", res, series, anchor)
        _write_run_meta(out, "forecast", seed,
                        {"anchor": anchor, "horizon": horizon,
                         "samples": samples, "history_mode": history_mode})
        click.echo(f"wrote {out / 'forecast.csv'}")
    except GludynError as exc:
        _fail(exc)


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True,
              type=click.Path(exists=True))
@click.option("--anchor", required=True, type=int)
@click.option("--horizon", default=36, show_default=True)
@click.option("--samples", default=200, show_default=True)
@click.option("--scenarios", "scenarios_path", type=click.Path(exists=True),
              help="JSON of {name: [[offset_min, carbs_g, bolus_U], ...]}; "
                   "defaults to the meal x bolus grid.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def counterfactual(checkpoint, data_path, anchor, horizon, samples,
                   scenarios_path, seed, out):
    """Forecast alternative input scenarios under common random numbers."""
    try:
        out = _out_dir(out)
        series = data.read_gridded_csv(data_path)
        series, _ = data.interpolate_gaps(series)
        result = inference.load_checkpoint(checkpoint)
        fc = forecast.Forecaster(result, series)
        basal = float(np.median(series.insulin))
        if scenarios_path:
            scen = forecast.load_scenarios(scenarios_path, basal, horizon)
        else:
            scen = forecast.meal_bolus_grid(basal, horizon)
        base = forecast.ForecastRequest(anchor=anchor, horizon=horizon,
                                        n_samples=samples)
        results = fc.counterfactual(base, scen, seed=seed)
        times = _times(series, anchor, horizon)
        with open(out / "counterfactual.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario", "iso8601_timestamp", "mean_mgdl",
                        "lo95_mgdl", "hi95_mgdl"])
            for name, res in results.items():
                for i, t in enumerate(times):
                    w.writerow([name, t, f"{res.mean[i]:.4f}",
                                f"{res.lo95[i]:.4f}", f"{res.hi95[i]:.4f}"])
        report.counterfactual_figure(out / "counterfactual.png", results)
        _write_run_meta(out, "counterfactual", seed,
                        {"anchor": anchor, "horizon": horizon,
                         "samples": samples,
                         "scenarios": sorted(results)})
        click.echo(f"wrote {out / 'counterfactual.csv'}")
    except GludynError as exc:
        _fail(exc)


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True,
              type=click.Path(exists=True),
              help="Evaluation series (must share the training grid origin "
                   "for the model forecaster).")
@click.option("--horizons", default="30,60,90,120,180,240,360",
              show_default=True, help="Comma-separated minutes.")
@click.option("--n-anchors", default=500, show_default=True)
@click.option("--warmup", default=288, show_default=True,
              help="Anchor indices to skip at the start.")
@click.option("--arma/--no-arma", default=True, show_default=True)
@click.option("--static-window/--no-static-window", default=False,
              show_default=True,
              help="Include the trailing-window simulator refit (slow).")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def evaluate(checkpoint, data_path, horizons, n_anchors, warmup, arma,
             static_window, seed, out):
    """Score the model against baselines, stratified by context."""
    try:
        out = _out_dir(out)
        series = data.read_gridded_csv(data_path)
        series, _ = data.interpolate_gaps(series)
        result = inference.load_checkpoint(checkpoint)
        h_steps = sorted({max(1, int(m) // data.STEP_MINUTES)
                          for m in horizons.split(",")})
        forecasters: dict[str, object] = {
            "dynamic": forecast.CachedStateForecaster(result, series),
            "naive": baselines.NaiveForecaster(series),
        }
        if arma:
            n_train = max(len(series) // 2, len(series) - 2000)
            cgm = series.cgm
            model = baselines.arma_select(cgm[:n_train],
                                          cgm[n_train:n_train + 576],
                                          orders=((0, 1, 2, 3), (0, 1, 2, 3)))
            forecasters["arma"] = baselines.ArmaForecaster(model, series)
        if static_window:
            forecasters["static_window"] = \
                baselines.StaticWindowForecaster(series,
                                                 s=result.static_params)
        df = metrics.evaluate(forecasters, series, horizons=h_steps,
                              n_anchors=n_anchors, seed=seed, warmup=warmup)
        metrics.write_metrics_csv(df, out / "metrics.csv")
        report.mae_by_horizon_figure(out / "mae.png", df, metric="mae")
        report.mae_by_horizon_figure(out / "mase.png", df, metric="mase")
        _write_run_meta(out, "evaluate", seed,
                        {"horizons_min": horizons, "n_anchors": n_anchors,
                         "warmup": warmup,
                         "models": sorted(forecasters)})
        click.echo(df[df.context == "anytime"]
                   .to_string(index=False, float_format=lambda v: f"{v:.3f}"))
        click.echo(f"wrote {out / 'metrics.csv'}")
    except GludynError as exc:
        _fail(exc)


@main.command()
@click.option("--minutes", default=720, show_default=True)
@click.option("--basal", default=None, type=float,
              help="Basal rate (U/min); solved for 120 mg/dL if omitted.")
@click.option("--meal", "meals", multiple=True,
              help="offset_min:grams, repeatable.")
@click.option("--bolus", "boluses", multiple=True,
              help="offset_min:units, repeatable.")
@click.option("--params", "params_path", type=click.Path(exists=True),
              help="JSON overriding the default physiology parameters.")
@click.option("--out", required=True, type=click.Path())
def simulate(minutes, basal, meals, boluses, params_path, out):
    """Open-loop physiology simulation from steady state."""
    try:
        out = _out_dir(out)
        s = (physio.StaticParams.from_json(Path(params_path).read_text())
             if params_path else physio.default_params())
        if basal is None:
            basal = physio.basal_for_target(s, 120.0)
        n = minutes // data.STEP_MINUTES
        insulin = np.full(n, basal * data.STEP_MINUTES)
        carbs = np.zeros(n)
        for spec in meals:
            off, grams = spec.split(":")
            carbs[int(off) // data.STEP_MINUTES] += float(grams)
        for spec in boluses:
            off, units = spec.split(":")
            insulin[int(off) // data.STEP_MINUTES] += float(units)
        x0 = physio.steady_state(s, basal_rate=basal)
        states, cgm = physio.run_schedule(s, insulin, carbs, x0=x0)
        with open(out / "simulation.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["minute", "cgm_mgdl", "insulin_units", "carbs_g"])
            for i in range(n):
                w.writerow([i * data.STEP_MINUTES, f"{cgm[i]:.4f}",
                            f"{insulin[i]:.4f}", f"{carbs[i]:.1f}"])
        fig_series = data.GriddedSeries(
            start_epoch=0, tz_offset_minutes=0, cgm=cgm, insulin=insulin,
            bolus=np.zeros(n), carbs=carbs, energy=np.zeros(n),
            interpolated=np.zeros(n, bool))
        report.series_overview_figure(out / "simulation.png", fig_series,
                                      title="Simulated physiology")
        _write_run_meta(out, "simulate", None,
                        {"minutes": minutes, "basal": basal,
                         "meals": list(meals), "boluses": list(boluses)})
        click.echo(f"wrote {out / 'simulation.csv'}")
    except GludynError as exc:
        _fail(exc)


if __name__ == "__main__":
    main()
