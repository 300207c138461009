"""Command-line interface: outputs, determinism, exit codes."""

import csv
import json

import pytest

from aigabench.cli import main


def read_csv_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_run_produces_outputs(tmp_path):
    out = tmp_path / "o"
    rc = main(["run", "--problem", "lshape", "--refiner", "thb-safe",
               "--theta", "0.2", "--steps", "3", "--out", str(out)])
    assert rc == 0
    rows = read_csv_rows(out / "run.csv")
    assert len(rows) == 3
    assert list(rows[0]) == ["step", "dof", "h1_error", "eta_total",
                             "cond", "nnz", "max_row_nnz", "elements",
                             "seconds"]
    assert [int(r["step"]) for r in rows] == [0, 1, 2]
    assert all(float(r["h1_error"]) > 0 for r in rows)
    summary = json.loads((out / "summary.json").read_text())
    assert "safe_thb" in summary
    assert summary["safe_thb"]["steps"] == 3
    for step in range(3):
        assert (out / f"mesh_step{step}.svg").exists()
        assert (out / f"sparsity_step{step}.mtx").exists()


def test_run_deterministic_modulo_timing(tmp_path):
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        rc = main(["run", "--problem", "lshape", "--refiner", "ts-safe",
                   "--theta", "0.2", "--steps", "2", "--out", str(out),
                   "--no-svg", "--no-sparsity"])
        assert rc == 0
        outs.append(read_csv_rows(out / "run.csv"))
    for ra, rb in zip(*outs):
        ra.pop("seconds")
        rb.pop("seconds")
        assert ra == rb


def test_run_uniform_refiner(tmp_path):
    out = tmp_path / "u"
    rc = main(["run", "--problem", "plate_hole", "--refiner", "uniform",
               "--steps", "2", "--out", str(out), "--no-svg",
               "--no-sparsity"])
    assert rc == 0
    rows = read_csv_rows(out / "run.csv")
    assert len(rows) == 2
    assert float(rows[1]["h1_error"]) < float(rows[0]["h1_error"])


def test_worst_case_has_nan_errors_but_matrix_stats(tmp_path):
    out = tmp_path / "w"
    rc = main(["run", "--problem", "worst_case", "--refiner", "thb-min",
               "--steps", "3", "--out", str(out), "--no-svg",
               "--no-sparsity"])
    assert rc == 0
    rows = read_csv_rows(out / "run.csv")
    assert all(int(r["nnz"]) > 0 for r in rows)
    assert all(int(r["max_row_nnz"]) > 0 for r in rows)
    # DOF strictly grows and the marked corner element keeps refining
    dofs = [int(r["dof"]) for r in rows]
    assert dofs == sorted(set(dofs))


def test_bad_problem_rejected(tmp_path):
    with pytest.raises(SystemExit):
        main(["run", "--problem", "nonexistent", "--refiner", "uniform",
              "--out", str(tmp_path / "x")])


def test_bad_refiner_rejected(tmp_path):
    with pytest.raises(SystemExit):
        main(["run", "--problem", "lshape", "--refiner", "nope",
              "--out", str(tmp_path / "x")])


def test_bad_theta_exits_nonzero(tmp_path, capsys):
    rc = main(["run", "--problem", "lshape", "--refiner", "thb-safe",
               "--theta", "7.0", "--out", str(tmp_path / "x")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err
