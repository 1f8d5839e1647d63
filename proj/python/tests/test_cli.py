"""Contract tests for the pisml command-line driver (needs PISML_CLI)."""

import csv
import hashlib
import json
import os
import subprocess
from pathlib import Path

import pytest

CLI = os.environ.get("PISML_CLI")
pytestmark = pytest.mark.skipif(not CLI, reason="PISML_CLI not set")


def run(*args, check=True):
    p = subprocess.run([CLI, *map(str, args)], capture_output=True, text=True)
    if check and p.returncode != 0:
        raise AssertionError(f"{args}: rc={p.returncode} {p.stderr}")
    return p


def numeric_digest(d: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(d.iterdir()):
        if f.name.startswith("manifest_"):
            continue
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data") / "d"
    run("dataset", "--n-traj", 3, "--seed", 1, "--out", d)
    return d


def test_dataset_is_deterministic(tmp_path):
    run("dataset", "--n-traj", 12, "--seed", 7, "--out", tmp_path / "a")
    run("dataset", "--n-traj", 12, "--seed", 7, "--out", tmp_path / "b")
    assert numeric_digest(tmp_path / "a") == numeric_digest(tmp_path / "b")
    assert len(list((tmp_path / "a").glob("traj_*.csv"))) == 12
    m = json.loads((tmp_path / "a" / "manifest_dataset.json").read_text())
    for key in ("command", "config_hash", "git_describe", "seed", "wall_time_s"):
        assert key in m
    m2 = json.loads((tmp_path / "b" / "manifest_dataset.json").read_text())
    assert m["config_hash"] == m2["config_hash"]


def test_mod_sindy_preset_contract(tmp_path, small_data):
    run("train", "--method", "mod-sindy", "--data", small_data, "--out", tmp_path)
    model = json.loads((tmp_path / "model.json").read_text())
    assert model["mode"] == "mod_sindy"
    assert model.get("mlp") is None


def test_report_over_five_presets(tmp_path, small_data):
    evals = []
    for method in ("std-sindy", "mod-sindy", "node", "pisml", "pisml-phy"):
        run("train", "--method", method, "--data", small_data, "--epochs", 1, "--out", tmp_path / method)
        run("eval", "--model", tmp_path / method / "model.json", "--out", tmp_path / ("eval_" + method))
        evals.append(tmp_path / ("eval_" + method))
    run("report", "--in", *evals, "--out", tmp_path / "report")
    with open(tmp_path / "report" / "table_errors.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["method", "standard_IOD", "standard_OOD"]
    assert [r[0] for r in rows[1:]] == ["std-sindy", "mod-sindy", "node", "pisml", "pisml-phy"]


def test_train_and_eval_are_reproducible(tmp_path, small_data):
    for name in ("a", "b"):
        run("train", "--method", "pisml-phy", "--data", small_data, "--epochs", 1, "--seed", 3,
            "--out", tmp_path / name)
    assert (tmp_path / "a" / "model.json").read_bytes() == (tmp_path / "b" / "model.json").read_bytes()


def test_config_flags_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"dataset": {"n_traj": 5, "seed": 2, "perturbations_per_traj": 1}}))
    run("dataset", "--config", cfg, "--n-traj", 2, "--out", tmp_path / "d")
    assert len(list((tmp_path / "d").glob("traj_*.csv"))) == 2
    m = json.loads((tmp_path / "d" / "manifest_dataset.json").read_text())
    assert m["config"]["dataset"]["seed"] == 2


def test_error_exit_codes(tmp_path, small_data):
    p = run("render", "--model", tmp_path / "nope.json", "--out", tmp_path / "r", check=False)
    assert p.returncode == 2 and "error=missing-file" in p.stderr
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dataset": {"n_trajectories": 3}}))
    p = run("dataset", "--config", bad, "--out", tmp_path / "d", check=False)
    assert p.returncode == 2 and "error=validation" in p.stderr
    (tmp_path / "locked").mkdir()
    (tmp_path / "locked" / ".pisml.lock").write_text("")
    p = run("simulate", "--out", tmp_path / "locked", check=False)
    assert p.returncode == 2 and "locked" in p.stderr


def test_numerical_failure_exit_code(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"params": {"P_0": 50.0}}))
    p = run("simulate", "--config", cfg, "--out", tmp_path / "s", check=False)
    assert p.returncode == 3 and "error=no-equilibrium" in p.stderr


def test_distill_needs_a_network(tmp_path, small_data):
    run("train", "--method", "mod-sindy", "--data", small_data, "--out", tmp_path / "m")
    p = run("distill", "--model", tmp_path / "m" / "model.json", "--data", small_data,
            "--out", tmp_path / "x", check=False)
    assert p.returncode == 2 and "error=validation" in p.stderr


def test_inputs_are_not_mutated(tmp_path, small_data):
    before = numeric_digest(small_data)
    run("train", "--method", "std-sindy", "--data", small_data, "--out", tmp_path / "t")
    assert numeric_digest(small_data) == before
