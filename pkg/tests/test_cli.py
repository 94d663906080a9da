import csv
import json
import math

import numpy as np
import pytest

from gmr.cli import run
from gmr.solver import deterministic_ode_solution
from gmr.transform import ModelParams

FBM9 = {"kind": "fbm", "hurst": 0.9}


def write_config(tmp_path, name, payload):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    return header, np.array(rows)


def test_simulate_zero_noise_matches_ode(tmp_path):
    cfg = write_config(
        tmp_path,
        "sim.json",
        {
            "model": {"x0": 2.0, "a": 1.0, "b": 2.0, "sigma": 0.0, "beta": 0.5},
            "kernel": FBM9,
            "grid": {"n": 256, "T": 1.0},
            "seed": 1,
        },
    )
    out = tmp_path / "out"
    assert run(["simulate", "--config", cfg, "--out", str(out)]) == 0
    header, rows = read_csv(out / "simulate.csv")
    assert header == ["t", "value"]
    p = ModelParams(x0=2.0, a=1.0, b=2.0, sigma=0.0, beta=0.5)
    ode = deterministic_ode_solution(p, rows[:, 0])
    assert np.max(np.abs(rows[:, 1] - ode)) <= 2.0 / 256


def test_simulate_byte_identical_reruns(tmp_path):
    cfg = write_config(
        tmp_path,
        "sim.json",
        {
            "model": {"x0": 1.0, "a": 1.0, "b": 1.0, "sigma": 0.5, "beta": 0.7},
            "kernel": {"kind": "fbm", "hurst": 0.8},
            "grid": {"n": 64, "T": 1.0},
            "seed": 9,
        },
    )
    assert run(["simulate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert run(["simulate", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "simulate.csv").read_bytes() == (
        tmp_path / "b" / "simulate.csv"
    ).read_bytes()


def test_simulate_csv_round_trips_via_sample_path(tmp_path):
    from gmr.drivers import SamplePath

    cfg = write_config(
        tmp_path,
        "sim.json",
        {
            "model": {"x0": 1.0, "a": 1.0, "b": 1.0, "sigma": 0.5, "beta": 0.7},
            "kernel": {"kind": "fbm", "hurst": 0.8},
            "grid": {"n": 32, "T": 1.0},
            "seed": 4,
        },
    )
    out = tmp_path / "out"
    assert run(["simulate", "--config", cfg, "--out", str(out)]) == 0
    path = SamplePath.from_csv(out / "simulate.csv")
    assert path.n_steps == 32
    assert path.horizon == 1.0


def test_simulate_seed_flag_overrides(tmp_path):
    base = {
        "model": {"x0": 1.0, "a": 1.0, "b": 1.0, "sigma": 0.5, "beta": 0.7},
        "kernel": {"kind": "fbm", "hurst": 0.8},
        "grid": {"n": 32, "T": 1.0},
        "seed": 9,
    }
    cfg = write_config(tmp_path, "sim.json", base)
    assert run(["simulate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert run(["simulate", "--config", cfg, "--seed", "10", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "a" / "simulate.csv").read_bytes() != (
        tmp_path / "c" / "simulate.csv"
    ).read_bytes()


def test_config_validation_failures(tmp_path):
    missing_beta = write_config(
        tmp_path,
        "bad1.json",
        {
            "model": {"x0": 1.0, "a": 1.0, "b": 1.0, "sigma": 0.5},
            "kernel": FBM9,
            "grid": {"n": 32, "T": 1.0},
            "seed": 1,
        },
    )
    assert run(["simulate", "--config", missing_beta, "--out", str(tmp_path)]) == 1
    unknown = write_config(
        tmp_path,
        "bad2.json",
        {
            "model": {"x0": 1.0, "a": 1.0, "b": 1.0, "sigma": 0.5, "beta": 0.7},
            "kernel": FBM9,
            "grid": {"n": 32, "T": 1.0},
            "seed": 1,
            "typo_key": 1,
        },
    )
    assert run(["simulate", "--config", unknown, "--out", str(tmp_path)]) == 1
    not_json = tmp_path / "bad3.json"
    not_json.write_text("{nope")
    assert run(["simulate", "--config", str(not_json), "--out", str(tmp_path)]) == 1
    assert run(["simulate", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == 1


def test_validation_error_names_offending_key(tmp_path, capsys):
    cfg = write_config(
        tmp_path,
        "bad.json",
        {
            "model": {"x0": 1.0, "a": 1.0, "b": 1.0, "sigma": 0.5, "beta": 0.7},
            "kernel": {"kind": "fbm", "hurst": 1.4},
            "grid": {"n": 32, "T": 1.0},
            "seed": 1,
        },
    )
    assert run(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert "hurst" in capsys.readouterr().err


def test_converge_outputs(tmp_path):
    cfg = write_config(
        tmp_path,
        "conv.json",
        {
            "model": {"x0": 1.0, "a": 1.0, "b": 1.0, "sigma": 0.3, "beta": 0.8},
            "kernel": FBM9,
            "T": 1.0,
            "n_list": [16, 32, 64],
            "ref_n": 512,
            "seed": 5,
        },
    )
    out = tmp_path / "out"
    assert run(["converge", "--config", cfg, "--out", str(out)]) == 0
    header, rows = read_csv(out / "converge.csv")
    assert header == ["n", "error"]
    assert rows.shape == (3, 2)
    payload = json.loads((out / "converge.json").read_text())
    assert set(payload) == {"fitted_slope", "theoretical_rate"}
    assert payload["theoretical_rate"] == pytest.approx(0.9)


def test_ensemble_outputs(tmp_path):
    cfg = write_config(
        tmp_path,
        "ens.json",
        {
            "model": {"x0": 1.0, "a": 1.0, "b": 1.0, "sigma": 0.5, "beta": 0.7},
            "kernel": {"kind": "fbm", "hurst": 0.8},
            "grid": {"n": 32, "T": 1.0},
            "ensemble": {"M": 25, "marginal_times": [0.5]},
            "seed": 3,
            "write_paths": True,
        },
    )
    out = tmp_path / "out"
    assert run(["ensemble", "--config", cfg, "--out", str(out)]) == 0
    payload = json.loads((out / "ensemble.json").read_text())
    assert payload["hit_fraction"] == 0.0
    assert len(payload["marginal_samples"]["0.5"]) == 25
    header, rows = read_csv(out / "ensemble_paths.csv")
    assert len(header) == 26 and rows.shape == (33, 26)


def test_hit_times_outputs(tmp_path):
    cfg = write_config(
        tmp_path,
        "hits.json",
        {
            "model": {"x0": 1.0, "a": 0.0, "b": 4.0, "sigma": 1.0, "beta": 0.8},
            "kernel": {"kind": "fbm", "hurst": 0.6},
            "horizons": [1.0, 2.0],
            "steps_per_unit": 32,
            "M": 200,
            "seed": 4,
        },
    )
    out = tmp_path / "out"
    assert run(["hit-times", "--config", cfg, "--out", str(out)]) == 0
    payload = json.loads((out / "hit_times.json").read_text())
    fr = [h["fraction"] for h in payload["horizons"]]
    assert fr[0] <= fr[1]


def test_hit_times_rejects_positive_a(tmp_path):
    cfg = write_config(
        tmp_path,
        "hits.json",
        {
            "model": {"x0": 1.0, "a": 1.0, "b": 4.0, "sigma": 1.0, "beta": 0.8},
            "kernel": {"kind": "fbm", "hurst": 0.6},
            "horizons": [1.0],
            "M": 10,
            "seed": 4,
        },
    )
    assert run(["hit-times", "--config", cfg, "--out", str(tmp_path)]) == 1


def test_survival_outputs(tmp_path):
    cfg = write_config(
        tmp_path,
        "surv.json",
        {
            "y0": 3.0,
            "model": {"b": 0.0, "sigma": 1.0, "beta": 0.5},
            "kernel": {"kind": "brownian"},
            "grid": {"n": 128, "T": 1.0},
            "M": 500,
            "seed": 6,
        },
    )
    out = tmp_path / "out"
    assert run(["survival", "--config", cfg, "--out", str(out)]) == 0
    payload = json.loads((out / "survival.json").read_text())
    assert payload["applicable"] and payload["passed"]
    assert payload["empirical"] >= payload["bound"] - 2 * payload["std_error"]


def test_pk_simulate_columns_and_determinism(tmp_path):
    cfg = write_config(
        tmp_path,
        "pk.json",
        {
            "pk": {"A0": 1.0, "v": 1.0, "Ke": 4.0, "sigma": 1.0, "beta": 0.8},
            "kernel": FBM9,
            "grid": {"n": 128, "T": 1.0},
            "seed": 2,
        },
    )
    out = tmp_path / "out"
    assert run(["pk-simulate", "--config", cfg, "--out", str(out)]) == 0
    header, rows = read_csv(out / "pk_simulate.csv")
    assert header == ["t", "stochastic", "deterministic"]
    assert np.all(rows[:, 1] >= 0.0)
    np.testing.assert_allclose(rows[:, 2], np.exp(-4.0 * rows[:, 0]), rtol=1e-12)


def test_pk_fit_consumes_pk_simulate_output(tmp_path):
    sim_cfg = write_config(
        tmp_path,
        "pk.json",
        {
            "pk": {"A0": 1.0, "v": 1.0, "Ke": 4.0, "sigma": 1.0, "beta": 0.8},
            "kernel": FBM9,
            "grid": {"n": 100, "T": 1.0},
            "seed": 8,
        },
    )
    out = tmp_path / "out"
    assert run(["pk-simulate", "--config", sim_cfg, "--out", str(out)]) == 0
    fit_cfg = write_config(
        tmp_path,
        "fit.json",
        {
            "pk_constants": {"A0": 1.0, "v": 1.0},
            "kernel": FBM9,
            "observations": str(out / "pk_simulate.csv"),
            "init": {"Ke": 2.0, "sigma": 0.5, "beta": 0.5},
            "bounds": {"ke_max": 20.0, "sigma_max": 10.0},
            "seed": 8,
        },
    )
    assert run(["pk-fit", "--config", fit_cfg, "--out", str(out)]) == 0
    payload = json.loads((out / "pk_fit.json").read_text())
    assert set(payload) == {"Ke", "sigma", "beta", "log_likelihood", "converged", "iterations"}
    assert payload["Ke"] > 0 and 0 < payload["beta"] < 1


def test_pk_fit_numerical_failure_exit_code(tmp_path):
    obs = tmp_path / "obs.csv"
    obs.write_text("t,concentration\r\n0.5,0.4\r\n1,0\r\n")
    cfg = write_config(
        tmp_path,
        "fit.json",
        {
            "pk_constants": {"A0": 1.0, "v": 1.0},
            "kernel": {"kind": "brownian"},
            "observations": str(obs),
            "init": {"Ke": 4.0, "sigma": 1.0, "beta": 0.8},
            "drop_nonpositive": False,
            "seed": 1,
        },
    )
    assert run(["pk-fit", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_pk_sensitivity_outputs(tmp_path):
    base = {
        "pk": {"A0": 1.0, "v": 1.0, "Ke": 4.0, "sigma": 1.0, "beta": 0.8},
        "kernel": {"kind": "fbm", "hurst": 0.8},
        "x": 1.0,
        "functional": "square",
        "tau": {"kind": "fixed", "time": 0.5},
        "grid": {"n": 64, "T": 1.0},
        "M": 400,
        "seed": 3,
    }
    cfg = write_config(tmp_path, "sens.json", base)
    out = tmp_path / "out"
    assert run(["pk-sensitivity", "--config", cfg, "--out", str(out)]) == 0
    payload = json.loads((out / "pk_sensitivity.json").read_text())
    assert payload["method"] == "pathwise"
    assert payload["tau"] == {"kind": "fixed", "time": 0.5}
    assert payload["M"] == 400
    fd_cfg = dict(base, method="fd", h=0.01)
    cfg2 = write_config(tmp_path, "sens_fd.json", fd_cfg)
    assert run(["pk-sensitivity", "--config", cfg2, "--out", str(out)]) == 0
    fd_payload = json.loads((out / "pk_sensitivity.json").read_text())
    combined = math.hypot(payload["std_error"], fd_payload["std_error"])
    assert abs(payload["estimate"] - fd_payload["estimate"]) <= 3 * combined


def test_threads_env_validation(tmp_path, monkeypatch):
    cfg = write_config(
        tmp_path,
        "sim.json",
        {
            "model": {"x0": 1.0, "a": 1.0, "b": 1.0, "sigma": 0.5, "beta": 0.7},
            "kernel": {"kind": "fbm", "hurst": 0.8},
            "grid": {"n": 16, "T": 1.0},
            "seed": 9,
        },
    )
    monkeypatch.setenv("GMR_THREADS", "nope")
    assert run(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 1
    monkeypatch.setenv("GMR_THREADS", "2")
    assert run(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0
    monkeypatch.delenv("GMR_THREADS")
    assert run(["simulate", "--config", cfg, "--threads", "0", "--out", str(tmp_path)]) == 1
