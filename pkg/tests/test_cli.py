from __future__ import annotations

import json
import math
import subprocess
import sys

import numpy as np
import pytest

from relyam.cli import run


def _gen(tmp_path, name, *extra):
    path = tmp_path / name
    assert run(["gen", *extra, "--out", str(path), "--quiet"]) == 0
    return str(path)


def _report(capsys, argv):
    code = run(argv)
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


@pytest.fixture
def cube_m10(tmp_path):
    return _gen(tmp_path, "cube_Rm10.json", "--shape", "cube", "--level", "2", "--R0", "-10")


def test_classify_negative_cube(capsys, cube_m10):
    code, rep = _report(capsys, ["classify", "--mesh", cube_m10, "--omega", "all", "--sigma", "all"])
    assert code == 0
    assert rep["sign"] == "Negative" and rep["eigenvalue"] < 0


def test_ball_dirichlet_eigenvalue(capsys, tmp_path):
    ball = _gen(tmp_path, "ball3.json", "--shape", "ball", "--level", "3")
    code, rep = _report(capsys, ["eigen", "--mesh", ball, "--sigma", "none"])
    assert code == 0
    assert abs(rep["eigenvalue"] - math.pi**2) / math.pi**2 < 0.05


def test_prescribe_predicate_false_exit_2(capsys, tmp_path, cube_m10):
    out = tmp_path / "rep.json"
    code, rep = _report(capsys, ["prescribe", "--mesh", cube_m10, "--rprime", "0", "--hprime", "0", "--out", str(out)])
    assert code == 2
    assert rep["status"] == "no-solution-per-theorem"
    assert json.loads(out.read_text()) == rep
    # verify agrees the negative answer is theorem-backed
    code, ver = _report(capsys, ["verify", "--mesh", cube_m10, "--report", str(out), "--rprime", "0", "--hprime", "0"])
    assert code == 2 and ver["consistent"]


def test_prescribe_converges_and_writes_trace(capsys, tmp_path, cube_m10):
    out = tmp_path / "rep.json"
    code, rep = _report(capsys, ["prescribe", "--mesh", cube_m10, "--rprime", "-2", "--hprime", "-1", "--out", str(out)])
    assert code == 0 and rep["status"] == "converged"
    assert min(rep["solution"]) > 0
    lines = (tmp_path / "rep.trace.csv").read_text().splitlines()
    assert lines[0] == "stage,q,r,F,residual,min_u"
    assert len(lines) == 1 + len(rep["trace"])
    code, ver = _report(capsys, ["verify", "--mesh", cube_m10, "--report", str(out), "--rprime", "-2", "--hprime", "-1"])
    assert code == 0 and ver["consistent"]
    code, ver = _report(capsys, ["verify", "--mesh", cube_m10, "--report", str(out), "--rprime", "-3", "--hprime", "-1"])
    assert code == 1 and not ver["consistent"]


def test_reports_are_byte_identical(tmp_path, cube_m10):
    outs = []
    for k in range(2):
        out = tmp_path / f"rep{k}.json"
        assert run(["prescribe", "--mesh", cube_m10, "--rprime", "-2", "--hprime", "-1", "--out", str(out), "--quiet"]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    a = (tmp_path / "rep0.trace.csv").read_bytes()
    b = (tmp_path / "rep1.trace.csv").read_bytes()
    assert a == b


def test_gen_with_seed_is_deterministic(tmp_path):
    a = _gen(tmp_path, "a.json", "--shape", "cube", "--level", "1", "--random-R", "2", "--seed", "5")
    b = _gen(tmp_path, "b.json", "--shape", "cube", "--level", "1", "--random-R", "2", "--seed", "5")
    c = _gen(tmp_path, "c.json", "--shape", "cube", "--level", "1", "--random-R", "2", "--seed", "6")
    assert open(a, "rb").read() == open(b, "rb").read() != open(c, "rb").read()


def test_yamabe_report(capsys, cube_m10):
    code, rep = _report(capsys, ["yamabe", "--mesh", cube_m10, "--q", "4", "--r", "3", "--b", "0"])
    assert code == 0 and rep["status"] == "converged"
    assert rep["value"] == pytest.approx(-10 / 8, rel=1e-8)
    assert set(rep) >= {"value", "lambda", "iterations", "residual", "status"}


def test_yamabe_rejects_q_equal_r(capsys, cube_m10):
    assert run(["yamabe", "--mesh", cube_m10, "--q", "3", "--r", "3"]) == 1
    assert "q" in capsys.readouterr().err


def test_empty_region_reports_inf(capsys, tmp_path, cube_m10):
    none = tmp_path / "none.json"
    none.write_text("[]")
    code, rep = _report(capsys, ["classify", "--mesh", cube_m10, "--omega", str(none), "--sigma", "none"])
    assert code == 0 and rep["sign"] == "Positive" and rep["eigenvalue"] == "inf"


def test_transform_round_trip(capsys, tmp_path, cube_m10):
    out = tmp_path / "t.json"
    assert run(["transform", "--mesh", cube_m10, "--factor", "2", "--out", str(out), "--quiet"]) == 0
    code, rep = _report(capsys, ["classify", "--mesh", str(out)])
    assert code == 0 and rep["sign"] == "Negative"
    doc = json.loads(out.read_text())
    assert sum(doc["volume_weights"]) == pytest.approx(64.0)


def test_transform_rejects_nonpositive(capsys, cube_m10, tmp_path):
    assert run(["transform", "--mesh", cube_m10, "--factor", "-1", "--out", str(tmp_path / "x.json")]) == 1
    assert "positive" in capsys.readouterr().err


def test_lichnerowicz(capsys, tmp_path):
    mesh = _gen(tmp_path, "c.json", "--shape", "cube", "--level", "2", "--R0", "-1")
    out = tmp_path / "l.json"
    code, rep = _report(
        capsys,
        ["lichnerowicz", "--mesh", mesh, "--rprime", "-1", "--hprime", "0", "--aw", "0.05", "--bw", "0", "--out", str(out)],
    )
    assert code == 0 and rep["min_u"] > 0
    code, ver = _report(
        capsys,
        ["verify", "--mesh", mesh, "--report", str(out), "--rprime", "-1", "--hprime", "0", "--aw", "0.05", "--bw", "0"],
    )
    assert code == 0 and ver["consistent"]


def test_lichnerowicz_negative_aw(capsys, tmp_path):
    mesh = _gen(tmp_path, "c.json", "--shape", "cube", "--level", "1", "--R0", "-1")
    assert run(["lichnerowicz", "--mesh", mesh, "--rprime", "-1", "--hprime", "0", "--aw", "-0.5", "--bw", "0"]) == 1
    assert "a_w" in capsys.readouterr().err


def test_field_files(capsys, tmp_path, cube_m10):
    doc = json.loads(open(cube_m10).read())
    n = len(doc["vertices"])
    rp = tmp_path / "rp.json"
    rp.write_text(json.dumps([-2.0] * n))
    hp = tmp_path / "hp.json"
    hp.write_text(json.dumps({k: -1.0 for k in doc["H_boundary"]}))
    code, rep = _report(capsys, ["prescribe", "--mesh", cube_m10, "--rprime", str(rp), "--hprime", str(hp), "--no-fields"])
    assert code == 0 and "R_recovered" not in rep["verification"]


def test_dump_matrices(tmp_path, cube_m10):
    d = tmp_path / "mats"
    assert run(["classify", "--mesh", cube_m10, "--dump-matrices", str(d), "--quiet"]) == 0
    assert sorted(p.name for p in d.iterdir()) == sorted(f"{k}.txt" for k in ("K", "M", "S", "M_R", "S_H", "A"))


@pytest.mark.parametrize(
    "argv, flag",
    [
        (["classify"], "--mesh"),
        (["yamabe", "--mesh", "X", "--q", "four"], "--q"),
        (["classify", "--mesh", "X", "--tol", "-1"], "--tol"),
        (["gen", "--shape", "torus", "--out", "x"], "--shape"),
    ],
)
def test_usage_errors_name_flag(capsys, argv, flag):
    assert run(argv) == 1
    assert flag in capsys.readouterr().err


def test_bad_region_names_flag(capsys, cube_m10, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("[100000]")
    assert run(["classify", "--mesh", cube_m10, "--omega", str(bad)]) == 1
    assert "--omega" in capsys.readouterr().err


def test_missing_mesh_file(capsys, tmp_path):
    assert run(["classify", "--mesh", str(tmp_path / "nope.json")]) == 1
    assert "nope.json" in capsys.readouterr().err


def test_global_flags_either_side(capsys, cube_m10):
    assert run(["--quiet", "classify", "--mesh", cube_m10]) == 0
    assert run(["classify", "--mesh", cube_m10, "--threads", "1", "--quiet"]) == 0
    assert capsys.readouterr().out == ""


def test_threads_env(monkeypatch, cube_m10):
    monkeypatch.setenv("RELYAM_THREADS", "0")
    assert run(["classify", "--mesh", cube_m10, "--quiet"]) == 1
    monkeypatch.setenv("RELYAM_THREADS", "2")
    assert run(["classify", "--mesh", cube_m10, "--quiet"]) == 0


def test_module_entry_point(tmp_path):
    out = tmp_path / "c.json"
    proc = subprocess.run(
        [sys.executable, "-m", "relyam", "gen", "--shape", "cube", "--level", "0", "--out", str(out)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["tets"] == 6
