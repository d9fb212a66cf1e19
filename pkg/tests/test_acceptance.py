"""End-to-end acceptance checks, one test and one summary line per criterion."""
import math
import time
import warnings

import numpy as np
import pytest

from volterra_smp.absde import (ABSDEProblem, ContractionWarning, RegressionBasis, build_regressors, check_contraction,
                                solve_absde)
from volterra_smp.errors import NonConvergence
from volterra_smp.forward import CoefficientSet, ControlSpec, picard_iterate, simulate_svide
from volterra_smp.grid import ConstantKernel, ExponentialKernel, make_uniform_grid
from volterra_smp.lq import (bounded_perturbation, lq_fixed_point, lq_qp_oracle, optimality_check,
                             relative_l2_error, riccati_control, uniqueness_gap)
from volterra_smp.runner import VERBS, run
from volterra_smp.scenario import load_scenario, shipped_scenarios
from volterra_smp.smp import check_gateaux, random_directions, stationarity_residual

SHIPPED = shipped_scenarios()
LQ_SCENARIOS = ("lq_classical", "lq_volterra_deterministic", "lq_volterra_stochastic")
SMP_SCENARIOS = ("smp_sine_two_kernels", "smp_linear_feedback", "smp_running_average")


def scenario(name):
    return load_scenario(SHIPPED[name])


@pytest.fixture(scope="module")
def lq_solutions():
    """Each shipped regulator solved once with its own solver settings."""
    out = {}
    for name in LQ_SCENARIOS:
        sc = scenario(name)
        co = sc.lq_coefficients()
        s, mc = sc["solver"], sc["monte_carlo"]
        sol = lq_fixed_point(co, mc["n_paths"], mc["seed"], damping=s["damping"], tol=s["tol"],
                             max_outer=s["max_outer"], picard_tol=s["picard_tol"], max_picard=s["max_picard"])
        out[name] = (sc, co, sol)
    return out


def test_forward_solver_matches_cosh(criterion):
    sc = scenario("svide_cosh")
    grid = sc.grid()
    assert grid.n_steps == 1000 and sc["monte_carlo"]["n_paths"] == 10_000
    start = time.perf_counter()
    ens = simulate_svide(sc.coefficients(), sc.kernel("k"), sc.kernel("l"), sc.control(grid), grid,
                         sc["monte_carlo"]["n_paths"], sc["monte_carlo"]["seed"], sc["x0"])
    elapsed = time.perf_counter() - start
    rel = abs(ens.X[:, -1].mean() - math.cosh(1.0)) / math.cosh(1.0)
    criterion(1, "E X_1 against cosh(1)", rel <= 0.01 and elapsed < 5.0,
              f"relative error {rel:.2e} <= 1e-2, {elapsed:.2f} s < 5 s")


def test_picard_deltas_decay(criterion):
    sc = scenario("svide_linear_picard")
    grid = sc.grid()
    rep = picard_iterate(sc.coefficients(), sc.kernel("k"), grid, sc["monte_carlo"]["n_paths"],
                         sc["monte_carlo"]["seed"], 10, sc["x0"])
    d = rep.deltas
    monotone = all(b < a for a, b in zip(d[2:], d[3:]))
    ratio = d[-1] / d[0]
    criterion(2, "Picard deltas", monotone and ratio < 1e-3 and len(d) == 10,
              f"monotone from iteration 3: {monotone}, last/first {ratio:.2e} < 1e-3")


def contraction_problem(scale):
    """Deterministic anticipated equation; ``scale`` multiplies the driver and the anticipated weight."""
    c = CoefficientSet(lambda t, x, y, u, v: 0 * x, lambda t, x, y, u, v: 0 * x)
    grid = make_uniform_grid(1.0, 200)
    ens = simulate_svide(c, ConstantKernel(0.0), ConstantKernel(0.0), ControlSpec.zero(), grid, 8, 0)
    m1, m2 = 0.5 * scale, 0.2 * scale
    prob = ABSDEProblem(lambda i, y, z, ya, za: m1 * (y + z + ya + za) + 0.3, np.ones(8),
                        ExponentialKernel(1.0), a1=m2, a2=m2, M1=m1, M2=m2)
    return prob, ens


def test_absde_contraction(criterion):
    prob, ens = contraction_problem(1.0)
    ok_condition = check_contraction(prob.M1, prob.M2, 1.0).satisfied
    adj = solve_absde(prob, ens, tol=1e-8, max_picard=25)
    ratios_ok = all(r < 1 for r in adj.ratios)

    bad, ens = contraction_problem(5.0)
    violated = not check_contraction(bad.M1, bad.M2, 1.0).satisfied
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ContractionWarning)
        try:
            solve_absde(bad, ens, tol=1e-8, max_picard=25)
            outcome = "solved"
        except NonConvergence as exc:
            outcome = f"non-convergence report with {len(exc.history)} deltas"
    warned = any(issubclass(w.category, ContractionWarning) for w in caught)
    criterion(3, "anticipated BSDE contraction",
              ok_condition and ratios_ok and adj.iterations <= 25 and violated and warned,
              f"{adj.iterations} iterations to 1e-8, max ratio {max(adj.ratios):.2e}; "
              f"violating case {outcome}")


def test_absde_nested_quadrature_oracle(criterion):
    grid = make_uniform_grid(1.0, 400)
    c = CoefficientSet(lambda t, x, y, u, v: 0 * x, lambda t, x, y, u, v: 0 * x)
    ens = simulate_svide(c, ConstantKernel(0.0), ConstantKernel(0.0), ControlSpec.zero(), grid, 8, 0)
    prob = ABSDEProblem(lambda i, y, z, ya, za: ya, np.ones(8), ConstantKernel(1.0), a1=1.0, M1=1.0, M2=1.0)
    adj = solve_absde(prob, ens, tol=1e-12)
    # y(t) = 1 + int_t^T int_s^T y(r) dr ds by nested right-endpoint sums
    N, dt = grid.n_steps, grid.dt
    oracle = np.empty(N + 1)
    oracle[N] = 1.0
    inner = np.zeros(N + 1)
    for i in range(N - 1, -1, -1):
        inner[i] = inner[i + 1] + dt * oracle[i + 1]
        oracle[i] = 1.0 + dt * inner[i:N].sum()
    err = float(np.max(np.abs(adj.y - oracle)))
    criterion(4, "anticipated BSDE against nested quadrature", err <= 10 * dt,
              f"max node error {err:.2e} <= {10 * dt:.2e}")


def test_gateaux_against_finite_differences(criterion):
    start = time.perf_counter()
    results = []
    both_kernels = False
    for name in SMP_SCENARIOS:
        sc = scenario(name)
        grid = sc.grid()
        prob = sc.control_problem(grid)
        both_kernels |= all(sc["kernels"][n]["kind"] != "zero" for n in ("k", "l"))
        mc, s = sc["monte_carlo"], sc["solver"]
        ens = simulate_svide(prob.coeffs, prob.k, prob.l, sc.control(grid), grid, mc["n_paths"], mc["seed"],
                             prob.x0)
        adj = prob.adjoint(ens, tol=s["picard_tol"], max_picard=s["max_picard"])
        for beta in random_directions(ens, 5, s["direction_seed"]):
            results.append(check_gateaux(prob, ens, adj, beta, eps=1e-3))
    elapsed = time.perf_counter() - start
    passed = sum(r["pass"] for r in results)
    worst = max(r["abs_diff"] / r["allowed"] for r in results)
    criterion(5, "Gateaux formula against central differences",
              passed == 15 and both_kernels and elapsed < 60.0,
              f"{passed}/15 directions within max(2%, 3 se), worst diff/allowed {worst:.2f}, {elapsed:.1f} s < 60 s")


def test_lq_against_riccati(criterion, lq_solutions):
    sc, co, sol = lq_solutions["lq_classical"]
    assert co.grid.n_steps == 200 and sol.ensemble.n_paths == 10_000
    err = relative_l2_error(sol.control, riccati_control(co, sol.ensemble.X), co.grid)
    criterion(6, "classical regulator against Riccati feedback", err <= 0.05,
              f"relative L2 error {err:.2e} <= 5e-2")


def test_lq_against_qp(criterion, lq_solutions):
    sc, co, sol = lq_solutions["lq_volterra_deterministic"]
    assert co.deterministic and co.grid.n_steps == 200 and np.any(co.B) and np.any(co.P)
    qp = lq_qp_oracle(co)
    err = relative_l2_error(sol.control.mean(axis=0), np.append(qp.control, 0.0), co.grid)
    criterion(7, "noise-free Volterra regulator against the direct QP", err <= 0.01,
              f"relative L2 error {err:.2e} <= 1e-2")


def test_optimality_inequality(criterion, lq_solutions):
    failures, total, worst = 0, 0, math.inf
    for name in LQ_SCENARIOS:
        sc, co, sol = lq_solutions[name]
        rng = np.random.default_rng([sc["monte_carlo"]["seed"], 1])
        betas = [bounded_perturbation(rng, sol.ensemble) for _ in range(100)]
        rows = optimality_check(co, sol, betas, (0.1, 0.01))
        total += len(rows)
        failures += sum(not r["pass"] for r in rows)
        worst = min(worst, min(r["dJ"] + 3 * r["stderr"] for r in rows))
    criterion(8, "J(u*) <= J(u* + eps beta)", failures == 0 and total == 600,
              f"{total - failures}/{total} perturbations pass, min dJ + 3 se = {worst:.2e}")


def test_uniqueness_gap(criterion, lq_solutions):
    held, total, worst = 0, 0, math.inf
    for name in LQ_SCENARIOS:
        sc, co, sol = lq_solutions[name]
        rng = np.random.default_rng([sc["monte_carlo"]["seed"], 2])
        for _ in range(100):
            u1 = bounded_perturbation(rng, sol.ensemble)
            u2 = bounded_perturbation(rng, sol.ensemble)
            rep = uniqueness_gap(co, u1, u2, dW=sol.ensemble.dW)
            held += rep.holds
            total += 1
            worst = min(worst, (rep.lhs - rep.rhs) + 3 * rep.stderr)
    criterion(9, "midpoint convexity with the delta/4 lower bound", held == total,
              f"{held}/{total} random pairs hold, min (lhs - rhs) + 3 se = {worst:.2e}")


def test_stationarity(criterion, lq_solutions):
    lines, ok = [], True
    for name in LQ_SCENARIOS:
        sc, co, sol = lq_solutions[name]
        tol = sc["solver"]["tol"]
        grid = co.grid
        problem = co.control_problem()
        res = stationarity_residual(problem.hamiltonian(sol.ensemble, sol.adjoint), co.l, grid, sol.regressors)
        shifted = problem.simulate(sol.control + 0.1, dW=sol.ensemble.dW)
        regs = build_regressors(shifted, RegressionBasis())
        adj = problem.adjoint(shifted, tol=sc["solver"]["picard_tol"], max_picard=sc["solver"]["max_picard"],
                              regressors=regs)
        res2 = stationarity_residual(problem.hamiltonian(shifted, adj), co.l, grid, regs)
        se = float(np.sqrt(np.sum(res2.stderr[:-1] ** 2) * grid.dt))
        bound = 0.1 * float(co.R.min()) * math.sqrt(grid.T) - 3 * se
        ok &= res.norm < 10 * tol and res2.norm >= bound
        lines.append(f"{name}: {res.norm:.1e} < {10 * tol:.0e}, shifted {res2.norm:.3f} >= {bound:.3f}")
    criterion(10, "stationarity residual", ok, "; ".join(lines))


def test_reproducibility_across_workers(criterion, tmp_path):
    # the path count is reduced for the two iterative verbs only to keep the suite short
    plan = [("simulate", "svide_cosh", None, "none"),
            ("simulate", "lq_volterra_stochastic", None, "none"),
            ("convergence", "svide_linear_picard", None, "none"),
            ("check-smp", "smp_sine_two_kernels", 2000, "none"),
            ("solve-lq", "lq_classical", 2000, "riccati")]
    assert {verb for verb, *_ in plan} == set(VERBS)
    mismatched = []
    for verb, name, paths, oracle in plan:
        sc = scenario(name).with_overrides(n_paths=paths)
        outs = []
        for workers in (1, 8):
            out = tmp_path / f"{verb}-{name}-{workers}"
            run(sc, verb, out, workers=workers, oracle=oracle)
            outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        if outs[0] != outs[1]:
            mismatched.append(f"{verb}/{name}")
    criterion(11, "byte-identical artifacts at 1 and 8 workers", not mismatched,
              f"{len(plan) - len(mismatched)}/{len(plan)} verb runs identical"
              + (f", differing: {', '.join(mismatched)}" if mismatched else ""))
