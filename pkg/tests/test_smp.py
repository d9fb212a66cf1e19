import math

import numpy as np
import pytest

from volterra_smp.absde import RegressionBasis, build_regressors, solve_absde
from volterra_smp.errors import InvalidArgument
from volterra_smp.forward import CoefficientSet, ControlSpec, simulate_svide, simulate_variational
from volterra_smp.grid import ConstantKernel, ExponentialKernel, make_uniform_grid
from volterra_smp.lq import LQCoefficients, lq_adjoint_problem
from volterra_smp.smp import (ControlProblem, CostSpec, assemble_adjoint_problem, check_gateaux, evaluate_cost,
                              finite_difference_derivative, fubini_gap, gateaux_derivative,
                              random_directions, stationarity_residual, variational_check)

ZERO = ConstantKernel(0.0)
NONE = CoefficientSet(lambda t, x, y, u, v: 0 * x, lambda t, x, y, u, v: 0 * x)


def sine_problem(N=40):
    coeffs = CoefficientSet(lambda t, x, y, u, v: -0.5 * x + 0.4 * np.sin(y) + u + 0.3 * np.sin(v),
                            lambda t, x, y, u, v: 0.2 + 0.1 * x + 0.1 * np.sin(y) + 0.1 * u)
    cost = CostSpec(lambda t, x, y, u, v: 0.5 * (x ** 2 + 0.5 * y ** 2 + u ** 2), lambda x: 0.5 * x ** 2)
    return ControlProblem(coeffs, cost, ExponentialKernel(1.0), ConstantKernel(0.5), make_uniform_grid(1.0, N))


def test_cost_of_nothing_is_zero():
    g = make_uniform_grid(1.0, 10)
    ens = simulate_svide(NONE, ZERO, ZERO, ControlSpec.zero(), g, 5, 0)
    J, per_path = evaluate_cost(ens, CostSpec(lambda t, x, y, u, v: 0 * x, lambda x: 0 * x))
    assert J.value == 0.0 and J.stderr == 0.0 and per_path.shape == (5,)


def test_unit_running_cost():
    g = make_uniform_grid(1.0, 10)
    ens = simulate_svide(NONE, ZERO, ZERO, ControlSpec.zero(), g, 5, 0)
    J, _ = evaluate_cost(ens, CostSpec(lambda t, x, y, u, v: 1 + 0 * x, lambda x: 0 * x))
    assert J.value == pytest.approx(1.0, abs=g.dt)


def test_terminal_cost_of_brownian_motion():
    g = make_uniform_grid(1.0, 10)
    c = CoefficientSet(lambda t, x, y, u, v: 0 * x, lambda t, x, y, u, v: 1 + 0 * x)
    n = 20000
    ens = simulate_svide(c, ZERO, ZERO, ControlSpec.zero(), g, n, 1, x0=0.0)
    J, _ = evaluate_cost(ens, CostSpec(lambda t, x, y, u, v: 0 * x, lambda x: x ** 2))
    assert abs(J.value - 1.0) <= 3 * math.sqrt(2 / n)
    assert J.stderr == pytest.approx(math.sqrt(2 / n), rel=0.1)


def test_terminal_derivative_agrees_with_differences():
    cost = CostSpec(lambda t, x, y, u, v: 0 * x, lambda x: np.sin(x) * x, {"g_x": lambda x: np.cos(x) * x + np.sin(x)})
    x = np.random.default_rng(0).uniform(-3, 3, 100)
    fd = CostSpec(cost.f, cost.g).g_x(x)
    assert np.max(np.abs(cost.g_x(x) - fd)) <= 10 * cost.h_fd ** 2 * 100


def test_hamiltonian_identity():
    prob = sine_problem()
    ens = prob.simulate(0.3 * np.ones(41), n_paths=500, seed=2)
    adj = prob.adjoint(ens)
    ham = prob.hamiltonian(ens, adj)
    t = ens.grid.nodes[None, :]
    args = (t, ens.X, ens.Y, ens.u, ens.v)
    b, s, f = prob.coeffs.b(*args), prob.coeffs.sigma(*args), prob.cost.f(*args)
    np.testing.assert_allclose(ham.H, b * adj.y_hat + s * adj.z + f, rtol=1e-14, atol=1e-14)
    np.testing.assert_array_equal(ham.H_p, b)
    np.testing.assert_array_equal(ham.H_q, s)


def test_adjoint_without_state_feedback():
    g = make_uniform_grid(1.0, 20)
    coeffs = CoefficientSet(lambda t, x, y, u, v: u + 0 * x, lambda t, x, y, u, v: 0.3 + 0 * x)
    cost = CostSpec(lambda t, x, y, u, v: u ** 2, lambda x: x)
    ens = simulate_svide(coeffs, ConstantKernel(1.0), ZERO, ControlSpec.zero(), g, 300, 0)
    prob = assemble_adjoint_problem(coeffs, cost, ens, ConstantKernel(1.0))
    assert not np.any(prob.a1) and not np.any(prob.a2) and prob.forcing is None
    adj = solve_absde(prob, ens)
    np.testing.assert_allclose(adj.y, 1.0, atol=1e-12)
    # z is the regression of 1 * dW / dt, which is pure sampling noise around 0
    assert abs(adj.z[:, :-1].mean()) < 3 / math.sqrt(ens.n_paths * g.T)


def test_zero_kernel_reduces_to_classical_adjoint():
    prob = sine_problem()
    prob = ControlProblem(prob.coeffs, prob.cost, ZERO, ZERO, prob.grid)
    ens = prob.simulate(0.0 * np.ones(41), n_paths=400, seed=3)
    assembled = assemble_adjoint_problem(prob.coeffs, prob.cost, ens, ZERO)
    full = solve_absde(assembled, ens)
    assembled.a1, assembled.a2, assembled.M2, assembled.forcing = 0.0, 0.0, 0.0, None
    classical = solve_absde(assembled, ens)
    np.testing.assert_allclose(full.y, classical.y, atol=1e-12)
    np.testing.assert_allclose(full.z, classical.z, atol=1e-12)


def test_lq_adjoint_matches_generic_assembly():
    g = make_uniform_grid(1.0, 30)
    rng = np.random.default_rng(5)
    co = LQCoefficients.build(g, ExponentialKernel(1.0), ConstantKernel(0.5), G=1.5,
                              A=rng.uniform(-1, 1, 31), B=0.3, C=1.0, P=0.4, D=0.2, F=0.1, H=0.3, N=0.2,
                              Q=1.0, S=rng.uniform(0, 1, 31), R=1.0, sigma0=0.1)
    ens = simulate_svide(co.coefficient_set(), co.k, co.l, ControlSpec.open_loop(np.sin(g.nodes)), g, 200, 1)
    lq = lq_adjoint_problem(co, ens)
    gen = assemble_adjoint_problem(co.coefficient_set(), co.cost_spec(), ens, co.k)
    a1l, a2l = lq.weights(ens.X.shape)
    a1g, a2g = gen.weights(ens.X.shape)
    np.testing.assert_allclose(a1l, a1g, atol=1e-14)
    np.testing.assert_allclose(a2l, a2g, atol=1e-14)
    np.testing.assert_allclose(lq.forcing, gen.forcing, atol=1e-14)
    np.testing.assert_allclose(lq.terminal, gen.terminal, atol=1e-14)
    y, z, ya, za = rng.normal(size=(4, 200))
    for i in (0, 7, 29):
        np.testing.assert_allclose(lq.driver(i, y, z, ya, za), gen.driver(i, y, z, ya, za), atol=1e-13)


def test_gateaux_in_zero_direction():
    prob = sine_problem()
    ens = prob.simulate(np.zeros(41), n_paths=100, seed=0)
    ham = prob.hamiltonian(ens, prob.adjoint(ens))
    assert gateaux_derivative(ham, 0.0, prob.l, prob.grid).value == 0.0


def test_gateaux_of_pure_control_cost():
    c = 0.7
    g = make_uniform_grid(1.0, 50)
    coeffs = CoefficientSet(lambda t, x, y, u, v: u + 0 * x, lambda t, x, y, u, v: 0 * x)
    cost = CostSpec(lambda t, x, y, u, v: 0.5 * u ** 2, lambda x: 0 * x)
    prob = ControlProblem(coeffs, cost, ZERO, ZERO, g)
    ens = prob.simulate(np.full(51, c), n_paths=20, seed=0)
    ham = prob.hamiltonian(ens, prob.adjoint(ens))
    assert gateaux_derivative(ham, 1.0, prob.l, g).value == pytest.approx(c, rel=1e-9)


def test_gateaux_rejects_mismatched_direction():
    prob = sine_problem()
    ens = prob.simulate(np.zeros(41), n_paths=50, seed=0)
    ham = prob.hamiltonian(ens, prob.adjoint(ens))
    with pytest.raises((InvalidArgument, ValueError)):
        gateaux_derivative(ham, np.ones((3, 41)), prob.l, prob.grid)


def test_gateaux_matches_finite_difference():
    prob = sine_problem()
    ens = prob.simulate(0.2 * np.sin(3 * prob.grid.nodes), n_paths=3000, seed=4)
    adj = prob.adjoint(ens)
    for beta in random_directions(ens, 3, seed=1):
        rep = check_gateaux(prob, ens, adj, beta)
        assert rep["pass"], rep


def test_richardson_ladder():
    prob = sine_problem(N=20)
    ens = prob.simulate(np.zeros(21), n_paths=200, seed=0)
    out = finite_difference_derivative(prob, ens.u, 1.0, ens.dW)
    vals = [e["value"] for e in out["ladder"]]
    assert len(vals) == 3
    assert abs(out["richardson"] - vals[1]) < 1e-4 * (1 + abs(vals[1]))


def test_stationarity_vanishes_for_control_free_dynamics():
    g = make_uniform_grid(1.0, 20)
    coeffs = CoefficientSet(lambda t, x, y, u, v: -x + 0 * u, lambda t, x, y, u, v: 0.3 + 0 * x)
    cost = CostSpec(lambda t, x, y, u, v: u ** 2 + x ** 2, lambda x: x ** 2)
    prob = ControlProblem(coeffs, cost, ConstantKernel(1.0), ZERO, g)
    ens = prob.simulate(np.zeros(21), n_paths=300, seed=0)
    adj = prob.adjoint(ens)
    res = stationarity_residual(prob.hamiltonian(ens, adj), ZERO, g, build_regressors(ens, RegressionBasis()))
    assert res.norm == 0.0


def boundary_problem():
    g = make_uniform_grid(1.0, 10)
    prob = ControlProblem(NONE, CostSpec(lambda t, x, y, u, v: (u + 1) ** 2, lambda x: 0 * x), ZERO, ZERO, g,
                          bounds=(0.0, np.inf))
    ens = prob.simulate(np.zeros(11), n_paths=50, seed=0)
    return prob, ens, prob.hamiltonian(ens, prob.adjoint(ens)), build_regressors(ens, RegressionBasis())


def test_variational_check_at_the_control_itself():
    prob, ens, ham, regs = boundary_problem()
    [rep] = variational_check(ham, ens.u, [ens.u], ZERO, prob.grid, regs, prob.bounds)
    assert rep["min_product"] == 0.0 and rep["pass"]


def test_variational_check_at_boundary_optimum():
    prob, ens, ham, regs = boundary_problem()
    reps = variational_check(ham, ens.u, [0.5, 2.0, np.linspace(0, 3, 11)], ZERO, prob.grid, regs, prob.bounds)
    assert all(r["pass"] and r["min_product"] >= 0 for r in reps)
    with pytest.raises(InvalidArgument):
        variational_check(ham, ens.u, [-1.0], ZERO, prob.grid, regs, prob.bounds)


def test_variational_check_detects_suboptimal_control():
    prob, ens, ham, regs = boundary_problem()
    # u = 0 is not optimal on [-5, inf): moving down lowers the cost
    [rep] = variational_check(ham, ens.u, [-1.0], ZERO, prob.grid, regs, (-5.0, np.inf))
    assert not rep["pass"]


def test_fubini_orders_agree():
    prob = sine_problem()
    ens = prob.simulate(0.1 * np.ones(41), n_paths=300, seed=6)
    adj = prob.adjoint(ens)
    weight = prob.coeffs.along(ens)["b_y"] * adj.y_hat
    V = simulate_variational(prob.coeffs, ens, np.cos(prob.grid.nodes), prob.k, prob.l)
    a, b = fubini_gap(ens, weight, V, prob.k)
    assert abs(a - b) <= 10 * prob.grid.dt
    assert abs(a - b) < 1e-12 * (1 + abs(a))


def test_random_directions_are_reproducible():
    prob = sine_problem()
    ens = prob.simulate(np.zeros(41), n_paths=10, seed=0)
    a = random_directions(ens, 4, 3)
    b = random_directions(ens, 4, 3)
    assert len(a) == 4 and all(np.array_equal(x, y) for x, y in zip(a, b))
    assert all(d.shape == ens.X.shape for d in a)
