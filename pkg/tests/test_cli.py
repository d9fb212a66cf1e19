import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from volterra_smp.cli import main

FROZEN = """
kind: svide
name: frozen
grid: {T: 1.0, N: 10}
x0: 2.0
dynamics: {family: linear, params: {}}
monte_carlo: {n_paths: 50, seed: 1}
solver: {picard_iterations: 2}
"""

SMALL_LQ = """
kind: lq
name: small_lq
grid: {T: 1.0, N: 20}
x0: 1.0
kernels:
  k: {kind: constant, c: 1.0}
  l: {kind: exponential, lam: 1.0}
lq: {A: 0.2, B: 0.5, C: 1.0, P: 0.5, Q: 1.0, S: 0.5}
monte_carlo: {n_paths: 16, seed: 3}
solver: {tol: 1.0e-9, damping: 0.4}
"""


def scenario(tmp_path, text, name="sc.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_simulate_frozen_dynamics(tmp_path):
    out = tmp_path / "out"
    assert main(["simulate", "--scenario", scenario(tmp_path, FROZEN), "--out", str(out)]) == 0
    rows = read_csv(out / "paths.csv")
    assert len(rows) == 11
    assert {float(r["X_mean"]) for r in rows} == {2.0}
    assert {float(r["X_std"]) for r in rows} == {0.0}
    summary = json.loads((out / "summary.json").read_text())
    assert summary["picard"]["deltas"] == [0.0, 0.0]
    assert len(summary["scenario_hash"]) == 64
    assert (out / "scenario.yaml").exists()


def test_solve_lq_with_qp_oracle(tmp_path):
    out = tmp_path / "lq"
    assert main(["solve-lq", "--scenario", scenario(tmp_path, SMALL_LQ), "--out", str(out), "--oracle", "qp"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["converged"]
    assert summary["oracle"]["kind"] == "qp"
    assert summary["oracle"]["relative_l2_error"] < 1e-6
    rows = read_csv(out / "solution.csv")
    assert len(rows) == 21 and "u_mean" in rows[0]


def test_solve_lq_with_riccati_oracle(tmp_path):
    text = """
kind: lq
grid: {T: 1.0, N: 40}
lq: {A: -1.0, C: 1.0, Q: 1.0, R: 1.0, G: 1.0, sigma0: 0.1}
monte_carlo: {n_paths: 2000, seed: 4}
solver: {tol: 1.0e-6}
"""
    out = tmp_path / "ric"
    assert main(["solve-lq", "--scenario", scenario(tmp_path, text), "--out", str(out), "--oracle", "riccati"]) == 0
    assert json.loads((out / "summary.json").read_text())["oracle"]["relative_l2_error"] <= 0.05


def test_check_smp_with_candidate_file(tmp_path):
    cand = tmp_path / "cand.csv"
    nodes = np.linspace(0, 1, 21)
    with cand.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["flat", "ramp"])
        w.writerows(zip([0.1] * 21, nodes))
    text = """
kind: smp-check
grid: {T: 1.0, N: 20}
kernels:
  k: {kind: exponential, lam: 1.0}
  l: {kind: constant, c: 0.5}
dynamics: {family: sine_memory, params: {bx: -0.3, by: 1.0, bu: 1.0, bv: 0.5, s0: 0.2, sx: 0.1}}
cost: {family: quadratic, params: {qx: 1.0, r: 1.0, gx: 1.0}}
control: {kind: constant, value: 0.2}
monte_carlo: {n_paths: 1500, seed: 2}
solver: {directions: 2}
candidates: [{kind: zero}]
"""
    out = tmp_path / "smp"
    assert main(["check-smp", "--scenario", scenario(tmp_path, text), "--out", str(out),
                 "--candidates", str(cand)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["variational"]) == 3
    assert len(summary["gateaux"]["checks"]) == 2 and summary["gateaux"]["all_pass"]
    assert summary["fubini"]["gap"] < 1e-10
    assert "gradient_mean" in read_csv(out / "paths.csv")[0]


def test_bad_candidate_file(tmp_path):
    cand = tmp_path / "cand.csv"
    cand.write_text("a\n1.0\n2.0\n")
    code = main(["check-smp", "--scenario", "smp_sine_two_kernels", "--paths", "100",
                 "--out", str(tmp_path / "o"), "--candidates", str(cand)])
    assert code == 2


def test_convergence_table(tmp_path):
    text = """
kind: svide
grid: {T: 1.0, N: 400}
kernels: {k: {kind: constant, c: 1.0}}
dynamics: {family: linear, params: {by: 1.0}}
monte_carlo: {n_paths: 4, seed: 0}
convergence: {N: [100, 200, 400]}
"""
    out = tmp_path / "conv"
    assert main(["convergence", "--scenario", scenario(tmp_path, text), "--out", str(out)]) == 0
    rows = read_csv(out / "convergence.csv")
    assert [int(r["N"]) for r in rows] == [100, 200, 400]
    ratios = [float(r["ratio"]) for r in rows[1:]]
    assert all(1.7 < r < 2.3 for r in ratios)


def test_validation_errors_exit_2(tmp_path, capsys):
    bad = scenario(tmp_path, SMALL_LQ.replace("damping: 0.4", "dampening: 0.4"))
    assert main(["solve-lq", "--scenario", bad, "--out", str(tmp_path / "x")]) == 2
    assert "damping" in capsys.readouterr().err
    assert main(["solve-lq", "--scenario", scenario(tmp_path, FROZEN, "f.yaml"), "--out", str(tmp_path / "y")]) == 2
    assert main(["simulate", "--scenario", str(tmp_path / "missing.yaml")]) == 2


def test_nonconvergence_exits_3(tmp_path, capsys):
    text = SMALL_LQ.replace("damping: 0.4", "damping: 0.4, max_outer: 2")
    assert main(["solve-lq", "--scenario", scenario(tmp_path, text), "--out", str(tmp_path / "nc")]) == 3
    assert "history" in capsys.readouterr().err


def test_compare_refuses_different_scenarios(tmp_path, capsys):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    path = scenario(tmp_path, FROZEN)
    assert main(["simulate", "--scenario", path, "--out", str(a)]) == 0
    assert main(["simulate", "--scenario", path, "--out", str(b)]) == 0
    assert main(["simulate", "--scenario", path, "--out", str(c), "--seed", "9"]) == 0
    capsys.readouterr()
    assert main(["compare", str(a / "summary.json"), str(b / "summary.json")]) == 0
    assert json.loads(capsys.readouterr().out)["identical"]
    assert main(["compare", str(a / "summary.json"), str(c / "summary.json")]) == 2
    assert main(["compare", str(a / "summary.json"), str(c / "summary.json"), "--force"]) == 0
    assert not json.loads(capsys.readouterr().out)["same_scenario"]


@pytest.mark.parametrize("threads", ["1", "4"])
def test_runs_are_byte_identical(tmp_path, threads):
    args = ["simulate", "--scenario", "svide_linear_picard", "--paths", "5000"]
    assert main(args + ["--out", str(tmp_path / "ref")]) == 0
    assert main(args + ["--out", str(tmp_path / "again"), "--threads", threads]) == 0
    for name in ("summary.json", "paths.csv", "scenario.yaml"):
        assert (tmp_path / "ref" / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_list_shipped_scenarios(capsys):
    assert main(["scenarios"]) == 0
    assert "lq_classical" in capsys.readouterr().out


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "volterra_smp", "simulate", "--scenario",
                           scenario(tmp_path, FROZEN), "--out", str(tmp_path / "m")],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0, proc.stderr
    assert "wrote" in proc.stderr
