from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest

from gsremoval.cli import main
from gsremoval.gaussians import load_ply, load_removal_set


@pytest.fixture
def spec_file(tmp_path):
    def make(**spec):
        path = tmp_path / "spec.json"
        path.write_text(json.dumps(spec))
        return path

    return make


def test_gen_fixture_then_eval_no_op(tmp_path, spec_file, capsys):
    assert main(["gen-fixture", str(spec_file(mode="none")), "--out", str(tmp_path / "fx")]) == 0
    assert main(["eval", str(tmp_path / "fx" / "manifest.json"), "--out", str(tmp_path / "r.json")]) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    for row in report["rows"]:
        assert (row["iou_drop"], row["acc_depth"], row["sim_sam"]) == (0.0, 0.0, 1.0)
    assert "0.00 / 0.00" in capsys.readouterr().out


def test_eval_csv_and_report(tmp_path, spec_file, capsys):
    main(["gen-fixture", str(spec_file(mode="perfect")), "--out", str(tmp_path / "fx")])
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"ght": {"n_bins": 64}}))
    manifest = str(tmp_path / "fx" / "manifest.json")
    assert main(["eval", manifest, "--config", str(cfg), "--out", str(tmp_path / "r.csv"), "--workers", "2"]) == 0
    assert (tmp_path / "r.summary.csv").exists()
    main(["eval", manifest, "--out", str(tmp_path / "r.json")])
    capsys.readouterr()
    assert main(["report", str(tmp_path / "r.json"), "--style", "table"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("scene,object,method") and "0.69 / 100" in out[1]
    assert main(["report", str(tmp_path / "r.json"), "--out", str(tmp_path / "s.csv")]) == 0
    assert "iou_drop_cell" in (tmp_path / "s.csv").read_text()


def test_eval_exit_3_on_view_failure(tmp_path, spec_file):
    main(["gen-fixture", str(spec_file(mode="perfect")), "--out", str(tmp_path / "fx")])
    (tmp_path / "fx" / "depth_post" / "000.pfm").write_bytes(b"junk")
    code = main(["eval", str(tmp_path / "fx" / "manifest.json"), "--out", str(tmp_path / "r.json")])
    assert code == 3
    rows = json.loads((tmp_path / "r.json").read_text())["rows"]
    assert rows[0]["error"] and rows[1]["error"] is None


def test_validate_lists_missing_path(tmp_path, spec_file, capsys):
    main(["gen-fixture", str(spec_file(mode="none")), "--out", str(tmp_path / "fx")])
    manifest = str(tmp_path / "fx" / "manifest.json")
    assert main(["validate", manifest]) == 0
    gone = tmp_path / "fx" / "depth_pre" / "001.pfm"
    gone.unlink()
    capsys.readouterr()
    assert main(["validate", manifest]) == 2
    assert str(gone) in capsys.readouterr().out


def test_invalid_manifest_exit_2(tmp_path):
    (tmp_path / "m.json").write_text("[")
    assert main(["validate", str(tmp_path / "m.json")]) == 2
    assert main(["eval", str(tmp_path / "m.json"), "--out", str(tmp_path / "r.json")]) == 2


def test_refine_outputs(tmp_path, spec_file):
    main(["gen-fixture", str(spec_file(mode="none", gaussians={})), "--out", str(tmp_path / "fx")])
    fx = tmp_path / "fx"
    args = ["refine", str(fx / "scene.ply"), str(fx / "seed.txt"), "--config", str(fx / "refine.json")]
    assert main(args + ["--out", str(tmp_path / "out")]) == 0
    cloud = load_ply(fx / "scene.ply")
    refined = load_removal_set(tmp_path / "out" / "refined_removal.txt", len(cloud))
    expected = json.loads((fx / "expected.json").read_text())["refine"]
    assert refined.flags[expected["residual"]].all()
    assert not refined.flags[expected["background"]].any()
    assert len(load_ply(tmp_path / "out" / "refined.ply")) == len(cloud) - refined.n_removed
    trace = (tmp_path / "out" / "energy_trace.csv").read_text().splitlines()
    assert trace[0] == "iteration,energy" and len(trace) >= 2


def test_refine_empty_seed_exit_4(tmp_path, spec_file, capsys):
    main(["gen-fixture", str(spec_file(mode="none", gaussians={})), "--out", str(tmp_path / "fx")])
    fx = tmp_path / "fx"
    seed = tmp_path / "empty.txt"
    seed.write_text("")
    code = main(["refine", str(fx / "scene.ply"), str(seed), "--out", str(tmp_path / "out")])
    assert code == 4
    assert "graph empty" in capsys.readouterr().err
    assert seed.read_text() == "" and not (tmp_path / "out").exists()


def test_refine_without_features_exit_2(tmp_path):
    from gsremoval.gaussians import GaussianCloud, save_ply

    save_ply(GaussianCloud.from_arrays(np.zeros((2, 3)), np.zeros((2, 3))), tmp_path / "c.ply")
    (tmp_path / "s.txt").write_text("0\n")
    assert main(["refine", str(tmp_path / "c.ply"), str(tmp_path / "s.txt"), "--out", str(tmp_path / "o")]) == 2


def test_bad_fixture_spec_exit_2(tmp_path, spec_file):
    assert main(["gen-fixture", str(spec_file(mode="bogus")), "--out", str(tmp_path / "fx")]) == 2


@pytest.mark.parametrize("argv", [["eval", "--bogus"], ["frobnicate"], []])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "gsremoval", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("gsremoval")
