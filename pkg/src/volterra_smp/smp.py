"""Maximum-principle toolkit: Hamiltonian, adjoint assembly and optimality checks.

The Hamiltonian is ``H = b p + sigma q + f``. Along a simulated bundle the
adjoint pair ``(p, q)`` is represented by the continuation value
``y_hat`` and ``z`` of :class:`~volterra_smp.absde.AdjointEnsemble`; with
that choice the discrete gradient of the Euler cost is exactly

    dJ/du_i = dt * (H_u(i) + sum over the transposed l-memory of H_v),

so the Gateaux formula can be checked against finite differences of the
same discrete cost.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .absde import (ABSDEProblem, AdjointEnsemble, NodeRegressor, RegressionBasis,
                    build_regressors, solve_absde)
from .errors import InvalidArgument
from .forward import ARGS, CoefficientSet, ControlSpec, PathEnsemble, central_difference, simulate_svide
from .grid import Kernel, TimeGrid, memory_adjoint


@dataclass(frozen=True)
class CostSpec:
    """Running cost ``f(t, x, y, u, v)`` and terminal cost ``g(x)``."""

    f: Callable
    g: Callable
    derivatives: Mapping[str, Callable] = field(default_factory=dict)
    h_fd: float = 1e-5

    def partial(self, var, t, x, y, u, v):
        d = self.derivatives.get(f"f_{var}")
        if d is not None:
            return np.broadcast_to(np.asarray(d(t, x, y, u, v), dtype=float), np.broadcast(x, y, u, v).shape)
        return central_difference(self.f, (t, x, y, u, v), 1 + ARGS.index(var), self.h_fd)

    def g_x(self, x):
        d = self.derivatives.get("g_x")
        if d is not None:
            return np.asarray(d(x), dtype=float) * np.ones(np.shape(x))
        return central_difference(self.g, (x,), 0, self.h_fd)

    def along(self, ens: PathEnsemble) -> dict[str, np.ndarray]:
        t = ens.grid.nodes[None, :]
        return {f"f_{a}": np.asarray(self.partial(a, t, ens.X, ens.Y, ens.u, ens.v), dtype=float)
                * np.ones_like(ens.X) for a in ARGS}


@dataclass
class Estimate:
    """Monte-Carlo mean with its standard error."""

    value: float
    stderr: float

    @classmethod
    def from_samples(cls, samples) -> "Estimate":
        s = np.asarray(samples, dtype=float)
        se = float(s.std(ddof=1) / np.sqrt(s.size)) if s.size > 1 else 0.0
        return cls(float(s.mean()), se)

    def to_dict(self):
        return {"value": self.value, "stderr": self.stderr}


def evaluate_cost(ens: PathEnsemble, cost: CostSpec) -> tuple[Estimate, np.ndarray]:
    """``E[sum_{i<N} f_i dt + g(X_N)]`` with its standard error, plus per-path costs."""
    t = ens.grid.nodes[None, :-1]
    run = np.asarray(cost.f(t, ens.X[:, :-1], ens.Y[:, :-1], ens.u[:, :-1], ens.v[:, :-1]), dtype=float)
    per_path = np.broadcast_to(run, ens.X[:, :-1].shape).sum(axis=1) * ens.grid.dt
    per_path = per_path + np.asarray(cost.g(ens.X[:, -1]), dtype=float)
    return Estimate.from_samples(per_path), per_path


@dataclass(eq=False)
class HamiltonianEval:
    H: np.ndarray
    H_x: np.ndarray
    H_y: np.ndarray
    H_u: np.ndarray
    H_v: np.ndarray
    H_p: np.ndarray
    H_q: np.ndarray


def hamiltonian(coeffs: CoefficientSet, cost: CostSpec, ens: PathEnsemble,
                adj: AdjointEnsemble) -> HamiltonianEval:
    """Hamiltonian and its partials along the bundle, with ``(p, q) = (y_hat, z)``."""
    t = ens.grid.nodes[None, :]
    args = (t, ens.X, ens.Y, ens.u, ens.v)
    p, q = adj.y_hat, adj.z
    ones = np.ones_like(ens.X)
    b = np.asarray(coeffs.b(*args), dtype=float) * ones
    s = np.asarray(coeffs.sigma(*args), dtype=float) * ones
    f = np.asarray(cost.f(*args), dtype=float) * ones
    d = coeffs.along(ens)
    fd = cost.along(ens)
    part = {a: d[f"b_{a}"] * p + d[f"sigma_{a}"] * q + fd[f"f_{a}"] for a in ARGS}
    return HamiltonianEval(b * p + s * q + f, part["x"], part["y"], part["u"], part["v"], b, s)


def assemble_adjoint_problem(coeffs: CoefficientSet, cost: CostSpec, ens: PathEnsemble,
                             k: Kernel) -> ABSDEProblem:
    """Adjoint equation along ``ens`` as an anticipated BSDE.

    Driver ``b_x p + pa + sigma_x q + qa + f_x`` with anticipated weights
    ``a1 = b_y``, ``a2 = sigma_y`` and the ``f_y`` memory as known forcing;
    terminal value ``g_x(X_N)``. Weights vanish at the last node because
    no Euler step or running cost is attached to it.
    """
    d = coeffs.along(ens)
    fd = cost.along(ens)

    def masked(a):
        a = np.array(a, dtype=float, copy=True)
        a[:, -1] = 0.0
        return a

    bx, sx, fx = d["b_x"], d["sigma_x"], fd["f_x"]

    def driver(i, y, z, ya, za):
        return bx[:, i] * y + ya + sx[:, i] * z + za + fx[:, i]

    a1, a2 = masked(d["b_y"]), masked(d["sigma_y"])
    forcing = masked(fd["f_y"])
    M1 = float(max(1.0, np.max(np.abs(bx)), np.max(np.abs(sx))))
    M2 = float(max(np.max(np.abs(a1)), np.max(np.abs(a2))))
    return ABSDEProblem(driver, cost.g_x(ens.X[:, -1]), k, a1, a2, M1, M2,
                        forcing if np.any(forcing) else None)


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """A complete control problem: dynamics, cost, kernels, grid and initial state."""

    coeffs: CoefficientSet
    cost: CostSpec
    k: Kernel
    l: Kernel
    grid: TimeGrid
    x0: float = 1.0
    bounds: tuple[float, float] = (-np.inf, np.inf)

    def simulate(self, control, dW=None, n_paths=1, seed=0, workers=1) -> PathEnsemble:
        if not isinstance(control, ControlSpec):
            control = ControlSpec.open_loop(control, self.bounds)
        return simulate_svide(self.coeffs, self.k, self.l, control, self.grid, n_paths, seed,
                              self.x0, dW=dW, workers=workers)

    def cost_of(self, control, dW) -> tuple[Estimate, np.ndarray]:
        return evaluate_cost(self.simulate(control, dW=dW), self.cost)

    def adjoint(self, ens: PathEnsemble, basis: RegressionBasis | None = None, **kw) -> AdjointEnsemble:
        return solve_absde(assemble_adjoint_problem(self.coeffs, self.cost, ens, self.k), ens, basis, **kw)

    def hamiltonian(self, ens, adj) -> HamiltonianEval:
        return hamiltonian(self.coeffs, self.cost, ens, adj)


def gradient_density(ham: HamiltonianEval, l: Kernel, grid: TimeGrid) -> np.ndarray:
    """Pathwise ``H_u(t) + int_t^T l(s,t) H_v(s) ds`` in its exact discrete form."""
    return ham.H_u + memory_adjoint(l, ham.H_v, grid)


def gateaux_derivative(ham: HamiltonianEval, beta, l: Kernel, grid: TimeGrid) -> Estimate:
    """``E int_0^T [H_u + int_t^T l(s,t) H_v(s) ds] beta_t dt`` from the adjoint."""
    g = gradient_density(ham, l, grid)
    beta = np.broadcast_to(np.asarray(beta, dtype=float), g.shape)
    if beta.shape != g.shape:
        raise InvalidArgument("direction does not match the bundle's paths and grid")
    return Estimate.from_samples((g * beta)[:, :-1].sum(axis=1) * grid.dt)


def central_fd_derivative(problem: ControlProblem, u, beta, dW, eps: float) -> Estimate:
    """``(J(u + eps beta) - J(u - eps beta)) / (2 eps)`` on shared increments."""
    u = np.asarray(u, dtype=float)
    beta = np.broadcast_to(np.asarray(beta, dtype=float), u.shape)
    _, jp = evaluate_cost(simulate_svide(problem.coeffs, problem.k, problem.l,
                                         ControlSpec.open_loop(u + eps * beta), problem.grid, 0, 0,
                                         problem.x0, dW=dW), problem.cost)
    _, jm = evaluate_cost(simulate_svide(problem.coeffs, problem.k, problem.l,
                                         ControlSpec.open_loop(u - eps * beta), problem.grid, 0, 0,
                                         problem.x0, dW=dW), problem.cost)
    return Estimate.from_samples((jp - jm) / (2.0 * eps))


def finite_difference_derivative(problem: ControlProblem, u, beta, dW,
                                 eps_ladder: Sequence[float] = (1e-2, 1e-3, 1e-4)) -> dict:
    """Central differences on a ladder of steps, plus a Richardson estimate.

    Central differences have an ``eps^2`` leading error, so the two largest
    steps ``e1 > e2`` combine into ``(e1^2 D(e2) - e2^2 D(e1)) / (e1^2 - e2^2)``.
    """
    ests = [central_fd_derivative(problem, u, beta, dW, e) for e in eps_ladder]
    out = {"ladder": [{"eps": e, **est.to_dict()} for e, est in zip(eps_ladder, ests)]}
    if len(ests) >= 2:
        e1, e2 = eps_ladder[0], eps_ladder[1]
        w = e1 ** 2 / (e1 ** 2 - e2 ** 2)
        out["richardson"] = w * ests[1].value + (1 - w) * ests[0].value
    return out


@dataclass
class StationarityResult:
    values: np.ndarray
    node_norms: np.ndarray
    norm: float
    stderr: np.ndarray


def _conditional_nodes(values, regressors: Sequence[NodeRegressor]):
    fitted = np.empty_like(values)
    se = np.zeros(values.shape[1])
    for i, reg in enumerate(regressors):
        fitted[:, i] = reg.fit(values[:, i])
        se[i] = reg.diagnostics(values[:, i], fitted[:, i])[1]
    return fitted, se


def stationarity_residual(ham: HamiltonianEval, l: Kernel, grid: TimeGrid,
                          regressors: Sequence[NodeRegressor]) -> StationarityResult:
    """``H_u(t) + E_t[int_t^T l(s,t) H_v(s) ds]`` per path and node.

    ``norm`` is the ``L2(dt x P)`` norm over nodes ``0..N-1``.
    """
    tail, se = _conditional_nodes(memory_adjoint(l, ham.H_v, grid), regressors)
    r = ham.H_u + tail
    node = np.sqrt(np.mean(r ** 2, axis=0))
    return StationarityResult(r, node, float(np.sqrt(np.sum(node[:-1] ** 2) * grid.dt)), se)


def variational_check(ham: HamiltonianEval, u, candidates, l: Kernel, grid: TimeGrid,
                      regressors: Sequence[NodeRegressor], bounds=(-np.inf, np.inf),
                      tol_floor: float = 1e-6) -> list[dict]:
    """Test ``[H_u + E_t int l H_v] (alpha - u) >= -tol`` for each candidate ``alpha``.

    The tolerance at a point is ``tol_floor + 3 se_i |alpha - u|`` where
    ``se_i`` is the regression standard error at that node.
    """
    res = stationarity_residual(ham, l, grid, regressors)
    u = np.asarray(u, dtype=float)
    lo, hi = bounds
    out = []
    for alpha in candidates:
        alpha = np.broadcast_to(np.asarray(alpha, dtype=float), u.shape)
        if np.any(alpha < lo) or np.any(alpha > hi):
            raise InvalidArgument(f"candidate control leaves the admissible set [{lo}, {hi}]")
        gap = alpha - u
        prod = (res.values * gap)[:, :-1]
        tol = tol_floor + 3.0 * res.stderr[None, :-1] * np.abs(gap[:, :-1])
        out.append({"min_product": float(prod.min()),
                    "worst_margin": float((prod + tol).min()),
                    "pass": bool(np.all(prod >= -tol))})
    return out


def fubini_gap(ens: PathEnsemble, weight, V, k: Kernel) -> tuple[float, float]:
    """Both orders of ``E int_0^T w(t) int_0^t k(t,s) V_s ds dt``.

    ``weight`` is e.g. ``b_y * p``; returns (memory-first, tail-first).
    """
    grid = ens.grid
    w = np.broadcast_to(np.asarray(weight, dtype=float), ens.X.shape)
    first = np.mean((w * k.quadrature(V, grid))[:, :-1].sum(axis=1)) * grid.dt
    second = np.mean((V * memory_adjoint(k, w, grid))[:, :-1].sum(axis=1)) * grid.dt
    return float(first), float(second)


def random_directions(ens: PathEnsemble, n: int, seed: int, scale: float = 1.0) -> list[np.ndarray]:
    """Adapted perturbation directions mixing smooth time profiles and the Brownian path."""
    rng = np.random.default_rng(seed)
    t = ens.grid.nodes[None, :]
    W = np.zeros_like(ens.X)
    W[:, 1:] = np.cumsum(ens.dW, axis=1)
    out = []
    for _ in range(n):
        a = rng.normal(size=4)
        freq = rng.uniform(0.5, 2.0)
        beta = a[0] + a[1] * np.sin(2 * np.pi * freq * t / ens.grid.T) + a[2] * np.cos(np.pi * t / ens.grid.T) + 0.5 * a[3] * W
        out.append(scale * beta)
    return out


def check_gateaux(problem: ControlProblem, ens: PathEnsemble, adj: AdjointEnsemble, beta,
                  eps: float = 1e-3, rel_tol: float = 0.02, n_se: float = 3.0) -> dict:
    """Compare the adjoint-based derivative with a central difference of ``J``."""
    ham = problem.hamiltonian(ens, adj)
    formula = gateaux_derivative(ham, beta, problem.l, problem.grid)
    fd = central_fd_derivative(problem, ens.u, beta, ens.dW, eps)
    combined = float(np.hypot(formula.stderr, fd.stderr))
    allowed = max(rel_tol * abs(fd.value), n_se * combined)
    diff = abs(formula.value - fd.value)
    return {"formula": formula.to_dict(), "finite_difference": fd.to_dict(), "eps": eps,
            "abs_diff": diff, "allowed": allowed, "pass": bool(diff <= allowed)}


__all__ = [
    "CostSpec", "Estimate", "HamiltonianEval", "ControlProblem", "StationarityResult",
    "evaluate_cost", "hamiltonian", "assemble_adjoint_problem", "gradient_density",
    "gateaux_derivative", "central_fd_derivative", "finite_difference_derivative",
    "stationarity_residual", "variational_check", "fubini_gap", "random_directions",
    "check_gateaux", "build_regressors",
]
