import json
import os

import numpy as np
import pytest

from cmsynth.cli import SchemaError, load_scenario, main, validate_scenario


def spacecraft_scenario(T=2.0, dt=0.5):
    return {
        "name": "sc_small",
        "benchmark": {"id": "spacecraft", "overrides": {}},
        "target": {"kind": "circle", "radius": 2.0, "period": 40.0},
        "synthesis": {"task": "control", "alpha": 0.3, "c1": 1.0, "c2": 0.01,
                      "R": 1.0, "T": T, "dt": dt, "stationary": True},
        "disturbance": {"kind": "deterministic", "d_bar": 0.1,
                        "waveform": "rotating", "seed": 7},
        "sim": {"T": 3.0, "dt": 0.005, "seeds": 2,
                "x0": [2.2, 0.1, 0.05, 0.0, 0.3, 0.0]},
        "bounds": {"kinds": ["deterministic"], "grace": 0.0},
    }


def write_scenario(tmp_path, doc, name="scn.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def test_schema_rejects_unknown_keys():
    with pytest.raises(SchemaError):
        validate_scenario({"benchmark": {"id": "lorenz"}, "bogus": 1})
    with pytest.raises(SchemaError):
        validate_scenario({"benchmark": {"id": "lorenz", "oops": 2}})
    with pytest.raises(SchemaError):
        validate_scenario({"name": "x"})  # no benchmark


def test_cli_schema_error_exit_code(tmp_path):
    path = write_scenario(tmp_path, {"benchmark": {"id": "lorenz"},
                                     "nonsense": True})
    assert main(["synth", "--scenario", path, "--out", str(tmp_path / "o")]) == 1


def test_cli_missing_artifact_exit_code(tmp_path):
    path = write_scenario(tmp_path, spacecraft_scenario())
    out = str(tmp_path / "out")
    os.makedirs(out)
    assert main(["train", "--scenario", path, "--out", out]) == 4
    assert main(["verify", "--scenario", path, "--out", out]) == 4


def test_synth_verify_pipeline_and_reproducibility(tmp_path):
    scn_path = write_scenario(tmp_path, spacecraft_scenario())
    out1 = str(tmp_path / "out1")
    out2 = str(tmp_path / "out2")
    assert main(["synth", "--scenario", scn_path, "--out", out1]) == 0
    assert main(["verify", "--scenario", scn_path, "--out", out1]) == 0
    # re-run from the manifest into a fresh directory: bit-exact artifacts
    manifest = os.path.join(out1, "manifest.json")
    assert main(["synth", "--scenario", manifest, "--out", out2]) == 0
    for fname in ("metric.json", "margins.csv"):
        b1 = open(os.path.join(out1, fname), "rb").read()
        b2 = open(os.path.join(out2, fname), "rb").read()
        assert b1 == b2
    report = json.load(open(os.path.join(out1, "containment.json")))
    assert report["passed"] is True
    # deliberately halving the decay rate in the bound must break containment
    doc = json.load(open(os.path.join(out1, "metric.json")))
    doc["alpha"] = doc["alpha"] * 20.0
    for s in doc["samples"]:
        s["alpha"] = doc["alpha"]
    with open(os.path.join(out1, "metric.json"), "w") as f:
        json.dump(doc, f)
    rc = main(["verify", "--scenario", scn_path, "--out", out1])
    assert rc == 5


def test_synth_dump_sdp(tmp_path):
    scn_path = write_scenario(tmp_path, spacecraft_scenario(T=1.0, dt=0.5))
    out = str(tmp_path / "dump")
    assert main(["synth", "--scenario", scn_path, "--out", out,
                 "--dump-sdp"]) == 0
    dumps = os.listdir(os.path.join(out, "sdp"))
    assert dumps
    doc = json.load(open(os.path.join(out, "sdp", sorted(dumps)[0])))
    assert "c" in doc and "blocks" in doc


def test_train_command(tmp_path):
    scn = spacecraft_scenario()
    scn["net"] = {"widths": [8], "inputs": ["x"], "epochs": 60, "lr": 0.05,
                  "batch": 4, "seed": 1, "val_fraction": 0.3}
    scn_path = write_scenario(tmp_path, scn)
    out = str(tmp_path / "train_out")
    assert main(["synth", "--scenario", scn_path, "--out", out]) == 0
    assert main(["train", "--scenario", scn_path, "--out", out]) == 0
    eps = json.load(open(os.path.join(out, "eps_l.json")))
    assert eps["eps_l"] >= 0.0
    loss_lines = open(os.path.join(out, "loss.csv")).read().splitlines()
    assert loss_lines[0] == "epoch,train_loss,val_eps"
    assert len(loss_lines) == 61


def test_adapt_command(tmp_path):
    scn = {
        "name": "arm",
        "benchmark": {"id": "lagrangian2", "overrides": {}},
        "adaptation": {"law": "slotine_li", "gamma": 8.0, "k_gain": 25.0,
                       "lambda_gain": 8.0, "theta0": [0.5, 1.6]},
        "sim": {"T": 12.0, "dt": 0.002},
    }
    scn_path = write_scenario(tmp_path, scn)
    out = str(tmp_path / "adapt_out")
    assert main(["adapt", "--scenario", scn_path, "--out", out]) == 0
    summary = json.load(open(os.path.join(out, "adapt_summary.json")))
    assert summary["final_err"] <= 5e-3
    header = open(os.path.join(out, "adaptation.csv")).readline().strip()
    assert header == "t,theta_1,theta_2,err_norm"


def test_estimation_pipeline(tmp_path):
    box = [[-20.0, 20.0], [-25.0, 25.0], [-5.0, 55.0]]
    verts = [[x1, x2, x3] for x1 in (-20.0, 20.0) for x2 in (-25.0, 25.0)
             for x3 in (-5.0, 55.0)]
    scn = {
        "name": "lorenz_est",
        "benchmark": {"id": "lorenz", "overrides": {}},
        "synthesis": {"task": "estimation", "alpha": 1.0, "c1": 1.0,
                      "c2": 0.001, "R": 1.0, "T": 1.0, "dt": 0.5,
                      "shared": True, "region_samples": verts,
                      "bounds": {"rho_bar": 1.0, "c_bar": 1.0}},
        "disturbance": {"kind": "deterministic", "d0_bar": 0.3,
                        "d1_bar": 0.002, "seed": 3},
        "sim": {"T": 4.0, "dt": 0.005, "seeds": 3,
                "x0_box": [[-10.0, 10.0]] * 3, "xhat0": [0.0, 0.0, 0.0]},
        "bounds": {"kinds": ["estimation"], "grace": 0.0},
    }
    scn_path = write_scenario(tmp_path, scn)
    out = str(tmp_path / "est_out")
    assert main(["synth", "--scenario", scn_path, "--out", out]) == 0
    assert main(["verify", "--scenario", scn_path, "--out", out]) == 0
    report = json.load(open(os.path.join(out, "containment.json")))
    assert report["passed"] is True


def test_load_scenario_accepts_manifest(tmp_path):
    scn = spacecraft_scenario()
    manifest = {"command": "synth", "scenario": scn, "artifacts": {}}
    path = write_scenario(tmp_path, manifest, "manifest.json")
    loaded = load_scenario(path)
    assert loaded["name"] == "sc_small"
