"""Run a scenario through one verb and write its artifacts.

Each run writes ``summary.json``, one or more CSV tables and the canonical
``scenario.yaml`` into the output directory. Everything written depends
only on the scenario (seed included), never on the worker count or the
clock, so reruns are byte-identical.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp

from . import __version__
from .absde import RegressionBasis, build_regressors, check_contraction
from .errors import InvalidArgument, ScenarioError
from .forward import (ControlSpec, brownian_increments, check_conditions, coarsen, picard_iterate,
                      simulate_svide)
from .lq import (bounded_perturbation, lq_adjoint, lq_fixed_point, lq_qp_oracle, optimality_check,
                 relative_l2_error, riccati_control, uniqueness_gap)
from .scenario import Scenario, build_control
from .smp import (Estimate, assemble_adjoint_problem, check_gateaux, evaluate_cost, fubini_gap, gradient_density,
                  random_directions, stationarity_residual, variational_check)

log = logging.getLogger(__name__)

VERBS = ("simulate", "solve-lq", "check-smp", "convergence")
ORACLES = ("qp", "riccati", "none")


def _clean(obj):
    """Plain-JSON version of ``obj``; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    return obj


def write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def write_table(path: Path, columns: dict[str, np.ndarray]) -> None:
    names = list(columns)
    rows = zip(*(np.asarray(columns[n]).tolist() for n in names))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, float) else x for x in row])


def node_stats(name: str, values: np.ndarray) -> dict[str, np.ndarray]:
    """Per-node mean, standard deviation and standard error of a path array."""
    P = values.shape[0]
    mean = values.mean(axis=0)
    std = values.std(axis=0, ddof=1) if P > 1 else np.zeros(values.shape[1])
    return {f"{name}_mean": mean, f"{name}_std": std, f"{name}_stderr": std / math.sqrt(P)}


def _basis(sc: Scenario) -> RegressionBasis:
    s = sc["solver"]
    return RegressionBasis(degree=s["basis_degree"], ridge=s["ridge"])


def _header(sc: Scenario, verb: str) -> dict:
    return {"verb": verb, "scenario_hash": sc.hash(), "scenario_name": sc["name"], "kind": sc.kind,
            "code_version": __version__, "seed": sc["monte_carlo"]["seed"],
            "n_paths": sc["monte_carlo"]["n_paths"], "grid": sc["grid"]}


def _dynamics(sc: Scenario, grid):
    if sc.kind == "lq":
        return sc.lq_coefficients(grid).coefficient_set()
    return sc.coefficients()


def _control_values(spec: ControlSpec, ens) -> np.ndarray:
    """Candidate control evaluated along the paths of ``ens``."""
    if spec.values is not None:
        return np.broadcast_to(spec.values if spec.values.shape[0] > 1 else spec.values[0], ens.X.shape).copy()
    t = ens.grid.nodes[None, :]
    return np.clip(np.asarray(spec.feedback(t, ens.X, ens.Y), dtype=float) * np.ones_like(ens.X), *spec.bounds)


def run_simulate(sc: Scenario, out: Path, workers: int) -> dict:
    grid = sc.grid()
    mc = sc["monte_carlo"]
    coeffs = _dynamics(sc, grid)
    k, l = sc.kernel("k"), sc.kernel("l")
    summary = _header(sc, "simulate")
    summary["conditions"] = check_conditions(coeffs, T=grid.T, seed=mc["seed"]).to_dict()
    summary["kernel_l1"] = {}
    for name, ker in (("k", k), ("l", l)):
        worst, ok = ker.check_l1(grid)
        summary["kernel_l1"][name] = {"worst_row_l1": worst, "within_bound": ok}
    ens = simulate_svide(coeffs, k, l, sc.control(grid), grid, mc["n_paths"], mc["seed"], sc["x0"],
                         workers=workers)
    summary["terminal_mean"] = Estimate.from_samples(ens.X[:, -1]).to_dict()
    cost = sc.lq_coefficients(grid).cost_spec() if sc.kind == "lq" else sc.cost()
    if cost is not None:
        summary["J"] = evaluate_cost(ens, cost)[0].to_dict()
    if sc.kind == "svide":
        rep = picard_iterate(coeffs, k, grid, mc["n_paths"], mc["seed"], sc["solver"]["picard_iterations"], sc["x0"])
        summary["picard"] = {"deltas": rep.deltas, "ratios": rep.ratios,
                             "contraction_failure": rep.contraction_failure}
    cols = {"time": grid.nodes}
    for name in ("X", "Y", "u", "v"):
        cols.update(node_stats(name, getattr(ens, name)))
    write_table(out / "paths.csv", cols)
    return summary


def run_check_smp(sc: Scenario, out: Path, workers: int, candidates=None) -> dict:
    if sc.kind == "svide":
        raise ScenarioError("check-smp needs a cost: use an smp-check or lq scenario")
    grid = sc.grid()
    mc, solver = sc["monte_carlo"], sc["solver"]
    problem = sc.control_problem(grid)
    ens = simulate_svide(problem.coeffs, problem.k, problem.l, sc.control(grid), grid, mc["n_paths"],
                         mc["seed"], problem.x0, workers=workers)
    basis = _basis(sc)
    regs = build_regressors(ens, basis)
    adj = problem.adjoint(ens, basis, beta=solver["beta"], tol=solver["picard_tol"],
                          max_picard=solver["max_picard"], regressors=regs)
    ham = problem.hamiltonian(ens, adj)
    summary = _header(sc, "check-smp")
    summary["J"] = evaluate_cost(ens, problem.cost)[0].to_dict()
    ap = assemble_adjoint_problem(problem.coeffs, problem.cost, ens, problem.k)
    cc = check_contraction(ap.M1, ap.M2, grid.T)
    summary["adjoint"] = {"iterations": adj.iterations, "beta_norm_deltas": adj.history, "ratios": adj.ratios,
                          "predicted_ratio": adj.predicted_ratio, "M1": ap.M1, "M2": ap.M2,
                          "contraction_condition": cc.satisfied, "flagged_nodes": adj.flagged,
                          "min_r2_continuation": float(np.min(adj.r2[:-1, 0])) if grid.n_steps else 1.0}
    checks = [check_gateaux(problem, ens, adj, beta, eps=solver["fd_eps"])
              for beta in random_directions(ens, solver["directions"], solver["direction_seed"])]
    summary["gateaux"] = {"checks": checks, "all_pass": all(c["pass"] for c in checks)}
    res = stationarity_residual(ham, problem.l, grid, regs)
    summary["stationarity_norm"] = res.norm
    cands = [_control_values(build_control(c, grid, problem.bounds), ens) for c in sc["candidates"]]
    if candidates is not None:
        cands += [_control_values(ControlSpec.open_loop(col, problem.bounds), ens)
                  for col in read_candidates(candidates, grid.n_nodes)]
    if cands:
        summary["variational"] = variational_check(ham, ens.u, cands, problem.l, grid, regs, problem.bounds)
    d = problem.coeffs.along(ens)
    first, second = fubini_gap(ens, d["b_y"] * adj.y_hat, ens.X, problem.k)
    summary["fubini"] = {"memory_first": first, "tail_first": second, "gap": abs(first - second)}
    cols = {"time": grid.nodes}
    for name in ("X", "Y", "u", "v"):
        cols.update(node_stats(name, getattr(ens, name)))
    cols.update(node_stats("p", adj.y_hat))
    cols.update(node_stats("q", adj.z))
    cols.update(node_stats("gradient", gradient_density(ham, problem.l, grid)))
    write_table(out / "paths.csv", cols)
    return summary


def run_solve_lq(sc: Scenario, out: Path, workers: int, oracle: str = "none") -> dict:
    if sc.kind != "lq":
        raise ScenarioError("solve-lq needs an lq scenario")
    if oracle not in ORACLES:
        raise InvalidArgument(f"unknown oracle {oracle!r}; choose from {list(ORACLES)}")
    grid = sc.grid()
    mc, solver, chk = sc["monte_carlo"], sc["solver"], sc["checks"]
    co = sc.lq_coefficients(grid)
    basis = _basis(sc)
    sol = lq_fixed_point(co, mc["n_paths"], mc["seed"], damping=solver["damping"], tol=solver["tol"],
                         max_outer=solver["max_outer"], basis=basis, picard_tol=solver["picard_tol"],
                         max_picard=solver["max_picard"], beta=solver["beta"], workers=workers)
    problem = co.control_problem()
    ham = problem.hamiltonian(sol.ensemble, sol.adjoint)
    res = stationarity_residual(ham, co.l, grid, sol.regressors)
    shifted_u = sol.control + chk["shift"]
    ens2 = problem.simulate(shifted_u, dW=sol.ensemble.dW, workers=workers)
    regs2 = build_regressors(ens2, basis)
    adj2 = lq_adjoint(co, ens2, basis, beta=solver["beta"], tol=solver["picard_tol"],
                      max_picard=solver["max_picard"], regressors=regs2)
    res2 = stationarity_residual(problem.hamiltonian(ens2, adj2), co.l, grid, regs2)
    node_se = float(np.sqrt(np.sum(res2.stderr[:-1] ** 2) * grid.dt))
    summary = _header(sc, "solve-lq")
    summary.update({
        "J": sol.J.to_dict(), "iterations": sol.iterations, "converged": sol.converged,
        "final_damping": sol.damping, "delta": co.delta, "log": sol.log,
        "stationarity_norm": res.norm, "tolerance": solver["tol"],
        "shifted": {"shift": chk["shift"], "stationarity_norm": res2.norm, "stderr": node_se,
                    "lower_bound": chk["shift"] * float(co.R.min()) * math.sqrt(grid.T)},
    })
    cols = {"time": grid.nodes}
    cols.update(node_stats("u", sol.control))
    cols.update(node_stats("X", sol.ensemble.X))
    cols.update(node_stats("p", sol.adjoint.y_hat))
    cols.update(node_stats("q", sol.adjoint.z))
    if oracle == "qp":
        qp = lq_qp_oracle(co)
        ref = np.append(qp.control, qp.control[-1])
        summary["oracle"] = {"kind": "qp", "J": qp.J,
                             "relative_l2_error": relative_l2_error(sol.control.mean(axis=0), ref, grid)}
        cols["u_oracle"] = ref
    elif oracle == "riccati":
        ref = riccati_control(co, sol.ensemble.X)
        summary["oracle"] = {"kind": "riccati", "relative_l2_error": relative_l2_error(sol.control, ref, grid)}
        cols["u_oracle"] = ref.mean(axis=0)
    if chk["perturbations"]:
        rng = np.random.default_rng([mc["seed"], 1])
        betas = [bounded_perturbation(rng, sol.ensemble) for _ in range(chk["perturbations"])]
        rows = optimality_check(co, sol, betas, tuple(chk["eps"]))
        summary["optimality"] = {"checks": len(rows), "all_pass": all(r["pass"] for r in rows),
                                 "worst_dJ_over_stderr": min((r["dJ"] / r["stderr"] if r["stderr"] > 0 else math.inf)
                                                             for r in rows)}
    if chk["pairs"]:
        rng = np.random.default_rng([mc["seed"], 2])
        reps = [uniqueness_gap(co, bounded_perturbation(rng, sol.ensemble), bounded_perturbation(rng, sol.ensemble),
                               dW=sol.ensemble.dW) for _ in range(chk["pairs"])]
        summary["uniqueness"] = {"pairs": len(reps), "all_hold": all(r.holds for r in reps),
                                 "min_lhs_minus_rhs": min(r.lhs - r.rhs for r in reps)}
    write_table(out / "solution.csv", cols)
    return summary


def read_candidates(path, n_nodes: int) -> list[np.ndarray]:
    """Candidate controls from a CSV file: one column per candidate, one row per node."""
    try:
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InvalidArgument(f"cannot read candidate file {path}: {exc.strerror}") from exc
    if not rows:
        raise InvalidArgument(f"{path}: empty candidate file")
    header, body = rows[0], rows[1:]
    if len(body) != n_nodes:
        raise InvalidArgument(f"{path}: expected {n_nodes} rows (one per node), got {len(body)}")
    try:
        table = np.array([[float(x) for x in r] for r in body])
    except ValueError as exc:
        raise InvalidArgument(f"{path}: non-numeric entry ({exc})") from exc
    if table.shape[1] != len(header):
        raise InvalidArgument(f"{path}: rows do not match the header width")
    return [table[:, j] for j in range(table.shape[1])]


def mean_ode_oracle(sc: Scenario) -> float | None:
    """``E X_T`` from the mean equation when the model allows one, else ``None``.

    Applies to the linear family with constant, exponential or zero kernels
    and deterministic open-loop controls; the memory terms are then extra
    ODE states.
    """
    if sc.kind == "lq" or sc["dynamics"]["family"] != "linear":
        return None
    kinds = {n: sc["kernels"][n]["kind"] for n in ("k", "l")}
    if any(kd not in ("zero", "constant", "exponential") for kd in kinds.values()):
        return None
    ctrl = sc["control"]
    if ctrl["kind"] not in ("zero", "constant", "sinusoid"):
        return None
    p = sc["dynamics"]["params"]
    lo, hi = sc.bounds

    def u(t):
        if ctrl["kind"] == "zero":
            return 0.0
        if ctrl["kind"] == "constant":
            return ctrl["value"]
        return ctrl["offset"] + ctrl["amplitude"] * math.sin(2 * math.pi * ctrl["frequency"] * t + ctrl["phase"])

    def memory_rate(name, source, state):
        spec = sc["kernels"][name]
        if spec["kind"] == "zero":
            return 0.0
        if spec["kind"] == "constant":
            return spec["c"] * source
        return source - spec["lam"] * state

    def rhs(t, z):
        m, my, mv = z
        ut = u(t)
        dm = p["b0"] + p["bx"] * m + p["by"] * my + p["bu"] * ut + p["bv"] * mv
        return [dm, memory_rate("k", m, my), memory_rate("l", ut, mv)]

    sol = solve_ivp(rhs, (0.0, sc["grid"]["T"]), [sc["x0"], 0.0, 0.0], rtol=1e-11, atol=1e-13, method="DOP853")
    return float(sol.y[0, -1])


def run_convergence(sc: Scenario, out: Path, workers: int) -> dict:
    if sc.kind == "lq":
        raise ScenarioError("convergence runs on svide or smp-check scenarios")
    conv, mc = sc["convergence"], sc["monte_carlo"]
    Ns = sorted(conv["N"])
    fine = Ns[-1] * conv["reference_factor"]
    if any(fine % n for n in Ns):
        raise ScenarioError("convergence.N: every grid size must divide the reference size")
    if any(sc["kernels"][n]["kind"] == "table" for n in ("k", "l")):
        raise ScenarioError("convergence: tabulated kernels exist on one grid only")
    coeffs = sc.coefficients()
    fine_grid = sc.grid(fine)
    dW_fine = brownian_increments(fine_grid, mc["n_paths"], mc["seed"])
    exact = mean_ode_oracle(sc)

    def terminal(n):
        grid = sc.grid(n)
        dW = coarsen(dW_fine, fine // n) if n != fine else dW_fine
        ens = simulate_svide(coeffs, sc.kernel("k", grid), sc.kernel("l", grid), sc.control(grid), grid, 0, 0,
                             sc["x0"], dW=dW, workers=workers)
        return ens.X[:, -1]

    ref = None if exact is not None else terminal(fine)
    rows = []
    for n in Ns:
        xt = terminal(n)
        diff = xt - (exact if exact is not None else ref)
        est = Estimate.from_samples(diff)
        rows.append({"N": n, "dt": sc["grid"]["T"] / n, "error": abs(est.value), "stderr": est.stderr,
                     "mean": float(xt.mean())})
    for a, b in zip(rows, rows[1:]):
        b["ratio"] = a["error"] / b["error"] if b["error"] > 0 else math.inf
    rows[0]["ratio"] = math.nan
    summary = _header(sc, "convergence")
    summary.update({"oracle": "mean_ode" if exact is not None else "self_reference",
                    "reference_value": exact if exact is not None else float(ref.mean()),
                    "reference_N": None if exact is not None else fine, "table": rows})
    cols = {"N": np.array(Ns)}
    cols.update({key: np.array([r[key] for r in rows], dtype=float) for key in ("dt", "error", "stderr", "ratio", "mean")})
    write_table(out / "convergence.csv", cols)
    return summary


def run(sc: Scenario, verb: str, out_dir, workers: int = 1, oracle: str = "none",
        candidates=None) -> dict:
    """Execute ``verb`` on ``sc`` and write the artifacts into ``out_dir``."""
    if verb not in VERBS:
        raise InvalidArgument(f"unknown verb {verb!r}; choose from {list(VERBS)}")
    if workers < 1:
        raise InvalidArgument("the worker count must be at least 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if verb == "simulate":
        summary = run_simulate(sc, out, workers)
    elif verb == "check-smp":
        summary = run_check_smp(sc, out, workers, candidates)
    elif verb == "solve-lq":
        summary = run_solve_lq(sc, out, workers, oracle)
    else:
        summary = run_convergence(sc, out, workers)
    write_json(summary, out / "summary.json")
    (out / "scenario.yaml").write_text(sc.to_yaml())
    return summary


def compare(path_a, path_b, force: bool = False) -> dict:
    """Numeric differences between two summaries of the same scenario."""
    a = json.loads(Path(path_a).read_text())
    b = json.loads(Path(path_b).read_text())
    if a.get("scenario_hash") != b.get("scenario_hash") and not force:
        raise InvalidArgument("summaries come from different scenarios (hash mismatch); use --force to compare anyway")
    diffs = {}

    def walk(x, y, key):
        if isinstance(x, dict) and isinstance(y, dict):
            for k in sorted(set(x) | set(y)):
                walk(x.get(k), y.get(k), f"{key}.{k}" if key else k)
        elif isinstance(x, list) and isinstance(y, list) and len(x) == len(y):
            for j, (p, q) in enumerate(zip(x, y)):
                walk(p, q, f"{key}[{j}]")
        elif isinstance(x, (int, float)) and isinstance(y, (int, float)) and not isinstance(x, bool):
            if x != y:
                diffs[key] = {"a": x, "b": y, "diff": y - x}
        elif x != y:
            diffs[key] = {"a": x, "b": y}

    walk(a, b, "")
    return {"same_scenario": a.get("scenario_hash") == b.get("scenario_hash"), "identical": not diffs,
            "differences": diffs}
