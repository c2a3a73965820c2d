import json
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from avsdf import body as B
from avsdf import cli
from avsdf import formats as F
from avsdf.errors import ContractViolation


def run(tmp_path, *args):
    report = tmp_path / "report.json"
    cli.run([*args, "--report", str(report)])
    return json.loads(report.read_text())


def test_gen_data_is_reproducible(tmp_path):
    args = ["gen-data", "--count", "3", "--cloud-points", "50", "--gt-uniform", "40", "--gt-surface", "40"]
    rep = run(tmp_path, *args, "--out", str(tmp_path / "a"))
    run(tmp_path, *args, "--out", str(tmp_path / "b"))
    assert rep["files"] == [f"body_{i:05d}.avsb" for i in range(3)]
    for name in rep["files"]:
        a = (tmp_path / "a" / name).read_bytes()
        assert a == (tmp_path / "b" / name).read_bytes()
        body, clouds, gt = B.load_external_body(tmp_path / "a" / name)
        assert clouds.shape == (15, 50, 3) and gt.shape == (80, 4)


def test_gen_data_zero_bodies(tmp_path):
    rep = run(tmp_path, "gen-data", "--count", "0", "--out", str(tmp_path / "none"))
    assert rep["files"] == [] and (tmp_path / "none").is_dir()


def test_train_then_eval(tmp_path):
    ckpt = tmp_path / "m.avsc"
    rep = run(tmp_path, "train", "--total-steps", "2", "--batch-size", "1", "--rank", "2", "--width", "16",
              "--points-per-part", "50", "--log-every", "1", "--out", str(ckpt))
    assert rep["steps"] == 2 and len(rep["loss_curve"]) == 2 and ckpt.exists()
    run(tmp_path, "gen-data", "--count", "1", "--cloud-points", "50", "--gt-uniform", "500",
        "--gt-surface", "500", "--out", str(tmp_path / "bodies"))
    ev = run(tmp_path, "eval", "--ckpt", str(ckpt), "--bodies", str(tmp_path / "bodies"))
    assert ev["bodies"][0].endswith("body_00000.avsb")
    assert ev["metrics"]["iou_mean"] < 90
    assert ev["schema_version"] == 1


def test_eval_synthetic_untrained(tmp_path):
    ev = run(tmp_path, "eval", "--rank", "0", "--width", "16", "--count", "1",
             "--n-uniform", "300", "--n-surface", "300")
    assert ev["bodies"] == ["synthetic:0"] and ev["metrics"]["iou_mean"] < 90


def test_query_matches_export_grid(tmp_path):
    common = ["--rank", "2", "--width", "16", "--seed", "3", "--cloud-points", "100"]
    run(tmp_path, "export-grid", *common, "--resolution", "8", "--out", str(tmp_path / "g.avsg"),
        "--points-out", str(tmp_path / "lattice.avsp"))
    run(tmp_path, "query", *common, "--points-file", str(tmp_path / "lattice.avsp"),
        "--out", str(tmp_path / "q.avsd"))
    _, grid = F.read_grid(tmp_path / "g.avsg")
    assert np.array_equal(grid.reshape(-1), F.read_sdf(tmp_path / "q.avsd"))


def test_resolve_selfpen_report_validates(tmp_path):
    rep = run(tmp_path, "resolve-selfpen", "--pose-name", "left_calf_cross", "--max-iters", "2")
    schema = json.loads(cli.schema_path().read_text())
    jsonschema.validate(rep, schema)
    assert rep["model"] == "capsule" and rep["iterations"] == 2


def test_resolve_selfpen_pose_file(tmp_path):
    pose = tmp_path / "pose.json"
    pose.write_text(json.dumps({"theta": np.zeros((15, 3)).tolist()}))
    rep = run(tmp_path, "resolve-selfpen", "--pose-file", str(pose))
    assert rep["status"] == "converged" and rep["max_joint_drift"] == 0.0


def test_bench_reports_medians(tmp_path):
    rep = run(tmp_path, "bench", "--rank", "0", "--width", "16", "--points", "2000", "--repeat", "5",
              "--cloud-points", "100")
    for mode in ("hybrid", "implicit-only"):
        assert len(rep["timings"][mode]["samples_ms"]) == 5
    assert rep["hybrid_over_implicit"] > 0
    empty = run(tmp_path, "bench", "--rank", "0", "--width", "16", "--points", "0", "--repeat", "1",
                "--cloud-points", "100", "--mode", "hybrid")
    assert empty["points"] == 0


def test_config_file_precedence(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# demo\ncount = 2\ncloud_points = 20\ngt_uniform=4\ngt_surface=4\n")
    rep = run(tmp_path, "gen-data", "--config", str(conf), "--count", "1", "--out", str(tmp_path / "o"))
    assert rep["config"]["count"] == 1 and rep["config"]["cloud_points"] == 20
    assert len(rep["files"]) == 1
    conf.write_text("colour = red\n")
    with pytest.raises(ContractViolation):
        cli.run(["gen-data", "--config", str(conf)])


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["bench", "--repeat", "0"]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 2 and err["error"] == "UsageError"
    assert cli.main(["eval", "--bogus"]) == 2
    capsys.readouterr()
    missing = str(tmp_path / "nope.avsp")
    assert cli.main(["query", "--rank", "0", "--width", "16", "--points-file", missing]) == 3
    bad = tmp_path / "bad.avsc"
    bad.write_bytes(b"garbage")
    assert cli.main(["eval", "--ckpt", str(bad)]) == 3
    assert cli.main(["query", "--rank", "0"]) == 2


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "avsdf.cli", "gen-data", "--count", "0",
                          "--out", str(tmp_path / "x")], capture_output=True, text=True)
    assert out.returncode == 0
    assert json.loads(out.stdout)["command"] == "gen-data"
