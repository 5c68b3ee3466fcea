"""CLI: end-to-end command flows on tiny fixtures."""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from gludyn.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> fit once; downstream commands reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    r = runner.invoke(main, ["synth", "--days", "2", "--seed", "4",
                             "--out", str(root / "synth")])
    assert r.exit_code == 0, r.output
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"max_iters": 15, "learning_rate": 1e-3,
                               "patience": 50}))
    r = runner.invoke(main, ["fit", "--data", str(root / "synth/series.csv"),
                             "--config", str(cfg), "--seed", "1",
                             "--out", str(root / "fit")])
    assert r.exit_code == 0, r.output
    return root


def test_synth_outputs(workspace):
    out = workspace / "synth"
    assert (out / "series.csv").exists()
    assert (out / "series.png").exists()
    meta = json.loads((out / "run.json").read_text())
    assert meta["command"] == "synth"
    assert meta["seed"] == 4
    assert "version" in meta


def test_fit_outputs(workspace):
    out = workspace / "fit"
    assert (out / "checkpoint.json").exists()
    assert (out / "loss.png").exists()
    meta = json.loads((out / "run.json").read_text())
    assert meta["config"]["max_iters"] == 15
    assert meta["config"]["seed"] == 1


def test_fit_rejects_unknown_config_keys(workspace, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"learning_rat": 0.1}))
    r = CliRunner().invoke(main, [
        "fit", "--data", str(workspace / "synth/series.csv"),
        "--config", str(bad), "--out", str(tmp_path / "out")])
    assert r.exit_code == 1
    assert "unknown config keys" in r.output


def test_forecast_command(workspace, tmp_path):
    out = tmp_path / "fc"
    r = CliRunner().invoke(main, [
        "forecast", "--checkpoint", str(workspace / "fit/checkpoint.json"),
        "--data", str(workspace / "synth/series.csv"),
        "--anchor", "200", "--horizon", "12", "--samples", "15",
        "--out", str(out)])
    assert r.exit_code == 0, r.output
    lines = (out / "forecast.csv").read_text().strip().splitlines()
    assert lines[0] == "iso8601_timestamp,mean_mgdl,lo95_mgdl,hi95_mgdl"
    assert len(lines) == 13
    assert (out / "forecast.png").exists()


def test_counterfactual_command(workspace, tmp_path):
    out = tmp_path / "cf"
    r = CliRunner().invoke(main, [
        "counterfactual",
        "--checkpoint", str(workspace / "fit/checkpoint.json"),
        "--data", str(workspace / "synth/series.csv"),
        "--anchor", "200", "--horizon", "24", "--samples", "15",
        "--out", str(out)])
    assert r.exit_code == 0, r.output
    text = (out / "counterfactual.csv").read_text()
    for name in ("nomeal_nobolus", "meal_nobolus", "nomeal_bolus",
                 "meal_bolus"):
        assert name in text
    assert (out / "counterfactual.png").exists()


def test_evaluate_command(workspace, tmp_path):
    out = tmp_path / "eval"
    r = CliRunner().invoke(main, [
        "evaluate", "--checkpoint", str(workspace / "fit/checkpoint.json"),
        "--data", str(workspace / "synth/series.csv"),
        "--horizons", "30,60", "--n-anchors", "40", "--warmup", "60",
        "--no-arma", "--out", str(out)])
    assert r.exit_code == 0, r.output
    import pandas as pd
    df = pd.read_csv(out / "metrics.csv")
    assert set(df["model"]) == {"dynamic", "naive"}
    assert (out / "mae.png").exists()


def test_simulate_command(tmp_path):
    out = tmp_path / "sim"
    r = CliRunner().invoke(main, [
        "simulate", "--minutes", "360", "--meal", "60:50",
        "--bolus", "60:5", "--out", str(out)])
    assert r.exit_code == 0, r.output
    lines = (out / "simulation.csv").read_text().strip().splitlines()
    assert len(lines) == 73
    cgm = np.array([float(l.split(",")[1]) for l in lines[1:]])
    assert cgm.max() > 130.0  # the meal shows up


def test_version_flag():
    r = CliRunner().invoke(main, ["--version"])
    assert r.exit_code == 0
