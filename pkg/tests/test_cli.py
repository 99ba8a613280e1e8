import csv
import io
import json

import pytest

from spx.cli import run
from spx.funcalc import canonical_problem, make_problem


@pytest.fixture
def problem_file(tmp_path):
    path = tmp_path / "cp1.json"
    path.write_text(json.dumps(canonical_problem(1e-4, 1e-2).to_dict()))
    return path


def test_check_ok(problem_file, capsys):
    assert run(["check", "--problem", str(problem_file)]) == 0
    out = capsys.readouterr().out
    assert "alpha = " in out and "regime = IV" in out


def test_check_indefinite(tmp_path, capsys):
    path = tmp_path / "bad.json"
    doc = {"epsilon": 0.1, "mu": 0.1, "a11": "1 - 2*x", "a12": "0", "a21": "0", "a22": "1",
           "f": "1", "g": "1"}
    path.write_text(json.dumps(doc))
    assert run(["check", "--problem", str(path)]) == 1
    assert "x" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["check", "--problem", "/nonexistent/p.json"],
    ["frobnicate"],
    ["verify", "--problem", "PROBLEM", "--case", "iv", "--m", "3"],
    ["verify", "--problem", "PROBLEM", "--eps", "0.5", "--mu", "0.1"],
    ["sweep", "--problem", "PROBLEM", "--eps", "1e-4,1e-5", "--mu", "1e-2,1e-3,1e-4"],
])
def test_input_errors(argv, problem_file):
    argv = [str(problem_file) if a == "PROBLEM" else a for a in argv]
    assert run(argv) == 2


def test_malformed_expression(tmp_path):
    path = tmp_path / "bad.json"
    doc = canonical_problem(1e-4, 1e-2).to_dict()
    doc["f"] = "exp(x"
    path.write_text(json.dumps(doc))
    assert run(["check", "--problem", str(path)]) == 2


def test_solve_csv(problem_file, capsys):
    assert run(["solve", "--problem", str(problem_file), "--n-mesh", "8"]) == 0
    captured = capsys.readouterr()
    rows = list(csv.reader(io.StringIO(captured.out)))
    assert rows[0] == ["x", "u", "v"]
    assert "error estimate" in captured.err


def test_expand_writes_terms(problem_file, tmp_path):
    out = tmp_path / "terms.json"
    assert run(["expand", "--problem", str(problem_file), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["case"] == "IV"
    assert doc["problem_hash"] == canonical_problem(1e-4, 1e-2).digest()
    assert all(c["passed"] for c in doc["checks"])


def test_single_point_sweep_equals_verify(problem_file, tmp_path):
    a, b = tmp_path / "v.csv", tmp_path / "s.csv"
    assert run(["verify", "--problem", str(problem_file), "--out", str(a)]) == 0
    assert run(["sweep", "--problem", str(problem_file), "--out", str(b)]) == 0
    assert a.read_text() == b.read_text()
    assert a.with_suffix(".json").exists()


def test_sweep_deterministic_and_jobs_invariant(problem_file, tmp_path):
    args = ["sweep", "--problem", str(problem_file), "--eps", "1e-2,4e-3,1e-3",
            "--mu", "0.1,0.0625,0.03125"]
    outs = []
    for extra in ([], [], ["--jobs", "2"]):
        out = tmp_path / f"s{len(outs)}.csv"
        run(args + extra + ["--out", str(out)])
        outs.append((out.read_text(), out.with_suffix(".json").read_text()))
    assert outs[0] == outs[1] == outs[2]
    rows = list(csv.DictReader(io.StringIO(outs[0][0])))
    assert [float(r["mu"]) for r in rows] == [0.1, 0.0625, 0.03125]
    assert all(r["fit_b"] for r in rows)
