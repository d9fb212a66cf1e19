"""Linear-quadratic regulator with kernel memory in state and control.

Dynamics and cost:

    dX = (A X + B Y + C u + P v) dt + (sigma0 + D X + F Y + H u + N v) dW,
    J  = 1/2 E[ int_0^T (Q X^2 + S Y^2 + R u^2) dt + G X_T^2 ],

with ``Y`` the ``k``-memory of ``X`` and ``v`` the ``l``-memory of ``u``.
``sigma0`` is an additive noise level that leaves the adjoint untouched.
The optimal control is found by damped fixed-point iteration on the
optimality condition, and checked against two independent oracles: a
Riccati ODE when there is no memory, and a direct quadratic program when
there is no noise.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .absde import (ABSDEProblem, AdjointEnsemble, NodeRegressor, RegressionBasis,
                    build_regressors, solve_absde)
from .errors import InvalidArgument, NonConvergence
from .forward import CoefficientSet, ControlSpec, PathEnsemble, brownian_increments, simulate_svide
from .grid import ConstantKernel, Kernel, TimeGrid, memory_adjoint
from .smp import ControlProblem, CostSpec, Estimate, evaluate_cost

log = logging.getLogger(__name__)

COEFFICIENTS = ("A", "B", "C", "P", "D", "F", "H", "N", "Q", "S", "R", "sigma0")


@dataclass(frozen=True, eq=False)
class LQCoefficients:
    """Per-node coefficient arrays of the regulator on ``grid``."""

    grid: TimeGrid
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    P: np.ndarray
    D: np.ndarray
    F: np.ndarray
    H: np.ndarray
    N: np.ndarray
    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray
    sigma0: np.ndarray
    G: float = 1.0
    k: Kernel = field(default_factory=lambda: ConstantKernel(0.0))
    l: Kernel = field(default_factory=lambda: ConstantKernel(0.0))
    x0: float = 1.0
    delta: float | None = None

    def __post_init__(self):
        n = self.grid.n_nodes
        for name in COEFFICIENTS:
            arr = np.array(np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (n,)))
            if not np.all(np.isfinite(arr)):
                raise InvalidArgument(f"coefficient {name} has non-finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.Q < 0) or np.any(self.S < 0):
            raise InvalidArgument("Q and S must be non-negative")
        if not self.G > 0:
            raise InvalidArgument(f"G must be positive, got {self.G}")
        delta = float(self.R.min()) if self.delta is None else float(self.delta)
        if not delta > 0:
            raise InvalidArgument(f"R must be bounded below by some delta > 0 (got delta={delta})")
        if np.any(self.R < delta):
            raise InvalidArgument(f"R falls below the declared delta={delta}")
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "G", float(self.G))

    @classmethod
    def build(cls, grid: TimeGrid, k: Kernel | None = None, l: Kernel | None = None,
              x0: float = 1.0, G: float = 1.0, delta: float | None = None, **coef) -> "LQCoefficients":
        """Coefficients from scalars or per-node arrays; unspecified ones are zero (R defaults to 1)."""
        unknown = set(coef) - set(COEFFICIENTS)
        if unknown:
            raise InvalidArgument(f"unknown LQ coefficients: {sorted(unknown)}")
        vals = {name: coef.get(name, 1.0 if name == "R" else 0.0) for name in COEFFICIENTS}
        return cls(grid=grid, G=G, k=k or ConstantKernel(0.0), l=l or ConstantKernel(0.0),
                   x0=x0, delta=delta, **vals)

    @property
    def deterministic(self) -> bool:
        return not any(np.any(getattr(self, c)) for c in ("D", "F", "H", "N", "sigma0"))

    def _fn(self, name):
        arr, nodes = getattr(self, name), self.grid.nodes
        return lambda t: np.interp(t, nodes, arr)

    def coefficient_set(self) -> CoefficientSet:
        A, B, C, P = (self._fn(c) for c in "ABCP")
        D, F, H, N = (self._fn(c) for c in "DFHN")
        s0 = self._fn("sigma0")

        def b(t, x, y, u, v):
            return A(t) * x + B(t) * y + C(t) * u + P(t) * v

        def sigma(t, x, y, u, v):
            return s0(t) + D(t) * x + F(t) * y + H(t) * u + N(t) * v

        derivs = {"b_x": lambda t, *a: A(t), "b_y": lambda t, *a: B(t),
                  "b_u": lambda t, *a: C(t), "b_v": lambda t, *a: P(t),
                  "sigma_x": lambda t, *a: D(t), "sigma_y": lambda t, *a: F(t),
                  "sigma_u": lambda t, *a: H(t), "sigma_v": lambda t, *a: N(t)}
        peak = max(float(np.max(getattr(self, c) ** 2)) for c in COEFFICIENTS if c not in "QSR")
        return CoefficientSet(b, sigma, L=5.0 * max(peak, 1e-12), derivatives=derivs)

    def cost_spec(self) -> CostSpec:
        Q, S, R = (self._fn(c) for c in "QSR")
        G = self.G

        def f(t, x, y, u, v):
            return 0.5 * (Q(t) * x ** 2 + S(t) * y ** 2 + R(t) * u ** 2)

        derivs = {"f_x": lambda t, x, y, u, v: Q(t) * x, "f_y": lambda t, x, y, u, v: S(t) * y,
                  "f_u": lambda t, x, y, u, v: R(t) * u, "f_v": lambda t, x, y, u, v: 0.0 * v,
                  "g_x": lambda x: G * x}
        return CostSpec(f, lambda x: 0.5 * G * x ** 2, derivs)

    def control_problem(self) -> ControlProblem:
        return ControlProblem(self.coefficient_set(), self.cost_spec(), self.k, self.l, self.grid, self.x0)


def lq_simulate(coeffs: LQCoefficients, control, n_paths: int = 1, seed: int = 0,
                dW: np.ndarray | None = None, workers: int = 1) -> PathEnsemble:
    if not isinstance(control, ControlSpec):
        control = ControlSpec.open_loop(np.asarray(control, dtype=float))
    return simulate_svide(coeffs.coefficient_set(), coeffs.k, coeffs.l, control, coeffs.grid,
                          n_paths, seed, coeffs.x0, dW=dW, workers=workers)


def lq_cost(coeffs: LQCoefficients, ens: PathEnsemble) -> tuple[Estimate, np.ndarray]:
    return evaluate_cost(ens, coeffs.cost_spec())


def lq_adjoint_problem(coeffs: LQCoefficients, ens: PathEnsemble) -> ABSDEProblem:
    """Adjoint of the regulator along ``ens``.

    Driver ``A p + pa + D q + qa + Q X`` with anticipated weights ``B`` and
    ``F`` and the ``S Y`` memory as forcing; terminal ``G X_T``.
    """
    A, D, Q = coeffs.A, coeffs.D, coeffs.Q
    X = ens.X

    def driver(i, y, z, ya, za):
        return A[i] * y + ya + D[i] * z + za + Q[i] * X[:, i]

    def masked(a):
        a = np.array(a, dtype=float, copy=True)
        a[..., -1] = 0.0
        return a

    forcing = masked(coeffs.S * ens.Y)
    M1 = float(max(1.0, np.max(np.abs(A)), np.max(np.abs(D))))
    M2 = float(max(np.max(np.abs(coeffs.B[:-1])), np.max(np.abs(coeffs.F[:-1]))))
    return ABSDEProblem(driver, coeffs.G * X[:, -1], coeffs.k, masked(coeffs.B), masked(coeffs.F),
                        M1, M2, forcing if np.any(forcing) else None)


def lq_adjoint(coeffs: LQCoefficients, ens: PathEnsemble, basis: RegressionBasis | None = None,
               **kw) -> AdjointEnsemble:
    return solve_absde(lq_adjoint_problem(coeffs, ens), ens, basis, **kw)


def lq_control_from_adjoint(coeffs: LQCoefficients, adj: AdjointEnsemble,
                            regressors: list[NodeRegressor] | None = None) -> np.ndarray:
    """Optimal-control formula ``-(C p + H q + E_t[int l (P p + N q)]) / R``.

    ``regressors`` provide the conditional expectation of the anticipated
    term; they may be omitted when ``l`` vanishes.
    """
    if np.any(coeffs.R < coeffs.delta):
        raise InvalidArgument("R falls below delta")
    p, q = adj.y_hat, adj.z
    tail = memory_adjoint(coeffs.l, coeffs.P * p + coeffs.N * q, coeffs.grid)
    if np.any(tail):
        if regressors is None:
            raise InvalidArgument("regressors are required when the control memory is active")
        cond = np.empty_like(tail)
        for i, reg in enumerate(regressors):
            cond[:, i] = reg.fit(tail[:, i])
        tail = cond
    return -(coeffs.C * p + coeffs.H * q + tail) / coeffs.R


def l2_norm(values, grid: TimeGrid) -> float:
    """``sqrt(E sum_{i<N} values_i^2 dt)``."""
    v = np.asarray(values, dtype=float)
    return float(np.sqrt(np.mean(v[..., :-1] ** 2, axis=0).sum() * grid.dt)) if v.ndim > 1 else \
        float(np.sqrt(np.sum(v[:-1] ** 2) * grid.dt))


def relative_l2_error(u, ref, grid: TimeGrid) -> float:
    u = np.asarray(u, dtype=float)
    ref = np.asarray(ref, dtype=float)
    return l2_norm(u - ref, grid) / l2_norm(ref, grid)


@dataclass(eq=False)
class LQSolution:
    control: np.ndarray
    ensemble: PathEnsemble
    adjoint: AdjointEnsemble
    regressors: list
    log: list[dict]
    damping: float
    converged: bool
    J: Estimate

    @property
    def iterations(self) -> int:
        return len(self.log)


def lq_fixed_point(coeffs: LQCoefficients, n_paths: int, seed: int, damping: float = 0.5,
                   tol: float = 1e-6, max_outer: int = 500, basis: RegressionBasis | None = None,
                   picard_tol: float = 1e-14, max_picard: int = 100, beta: float | None = None,
                   u0=None, dW: np.ndarray | None = None, workers: int = 1,
                   rise_floor: float = 1e-2) -> LQSolution:
    """Damped fixed-point iteration on the optimality condition.

    Each outer step simulates the state under the current control on fixed
    Brownian increments, solves the adjoint, evaluates the control formula
    and moves a fraction ``damping`` towards it. Stops when the
    ``L2(dt x P)`` size of the control update drops below ``tol``. If the
    cost rises three iterations running the damping is halved, at most five
    times. Rises smaller than ``rise_floor`` standard errors of ``J`` are
    ignored: near the fixed point the regression bias alone moves ``J`` by
    that little.
    """
    if not 0 < damping <= 1:
        raise InvalidArgument(f"damping must lie in (0, 1], got {damping}")
    grid = coeffs.grid
    basis = basis or RegressionBasis()
    if dW is None:
        dW = brownian_increments(grid, n_paths, seed)
    n_paths = dW.shape[0]
    u = np.zeros((n_paths, grid.n_nodes)) if u0 is None else np.array(
        np.broadcast_to(np.asarray(u0, dtype=float), (n_paths, grid.n_nodes)))
    theta = damping
    halvings = 0
    rises = 0
    history: list[dict] = []
    adj = None
    for it in range(max_outer):
        ens = lq_simulate(coeffs, u, dW=dW, workers=workers)
        J, _ = lq_cost(coeffs, ens)
        regs = build_regressors(ens, basis)
        adj = lq_adjoint(coeffs, ens, basis, beta=beta, tol=picard_tol, max_picard=max_picard,
                         regressors=regs, init=adj)
        cand = lq_control_from_adjoint(coeffs, adj, regs)
        gap = l2_norm(cand - u, grid)
        step = theta * gap
        history.append({"iteration": it + 1, "J": J.value, "J_stderr": J.stderr,
                        "stationarity": l2_norm(coeffs.R * (u - cand), grid),
                        "control_delta": step, "picard_iterations": adj.iterations, "damping": theta})
        log.debug("outer %d: J=%.10g delta=%.3g", it + 1, J.value, step)
        if step < tol:
            return LQSolution(u, ens, adj, regs, history, theta, True, J)
        # rises below a sliver of the Monte-Carlo error are regression bias, not overshoot
        floor = max(1e-10 * abs(J.value), rise_floor * J.stderr)
        if len(history) > 1 and J.value > history[-2]["J"] + floor:
            rises += 1
        else:
            rises = 0
        if rises >= 3:
            if halvings >= 5:
                raise NonConvergence("cost kept increasing after five damping halvings",
                                     [h["J"] for h in history])
            theta /= 2.0
            halvings += 1
            rises = 0
            log.warning("cost increased three times in a row; damping halved to %g", theta)
        u = (1.0 - theta) * u + theta * cand
    raise NonConvergence(f"fixed point not reached in {max_outer} outer iterations",
                         [h["J"] for h in history])


@dataclass
class QPSolution:
    control: np.ndarray     # nodes 0..N-1
    state: np.ndarray       # nodes 0..N
    J: float


def lq_qp_oracle(coeffs: LQCoefficients) -> QPSolution:
    """Exact minimiser of the discrete deterministic regulator.

    Builds the affine map from the control vector ``u_0..u_{N-1}`` to the
    Euler states (memory included), assembles the quadratic cost and solves
    its normal equations directly.
    """
    if not coeffs.deterministic:
        raise InvalidArgument("the QP oracle needs D = F = H = N = sigma0 = 0")
    grid = coeffs.grid
    n, dt = grid.n_steps, grid.dt
    Wk = coeffs.k.matrix(grid) * dt
    Wl = coeffs.l.matrix(grid) * dt
    Wk[0, 0] = 1.0
    Wl[0, 0] = 1.0
    Mu = np.zeros((n + 1, n))
    Mu[:n] = np.eye(n)
    Mv = Wl @ Mu
    # rows are affine maps [coefficients on u | constant]
    Mx = np.zeros((n + 1, n + 1))
    My = np.zeros((n + 1, n + 1))
    Mx[0, -1] = coeffs.x0
    Uaug = np.hstack([Mu, np.zeros((n + 1, 1))])
    Vaug = np.hstack([Mv, np.zeros((n + 1, 1))])
    A, B, C, P = coeffs.A, coeffs.B, coeffs.C, coeffs.P
    for i in range(n + 1):
        My[i] = Wk[i, : i + 1] @ Mx[: i + 1] if i else Mx[0]
        if i < n:
            Mx[i + 1] = Mx[i] + dt * (A[i] * Mx[i] + B[i] * My[i] + C[i] * Uaug[i] + P[i] * Vaug[i])
    Q, S, R = coeffs.Q, coeffs.S, coeffs.R
    Hm = dt * np.diag(R[:n])
    g = np.zeros(n)
    for i in range(n):
        for w, M in ((Q[i], Mx[i]), (S[i], My[i])):
            if w:
                Hm += dt * w * np.outer(M[:-1], M[:-1])
                g += dt * w * M[-1] * M[:-1]
    Hm += coeffs.G * np.outer(Mx[n, :-1], Mx[n, :-1])
    g += coeffs.G * Mx[n, -1] * Mx[n, :-1]
    try:
        u = linalg.solve(Hm, -g, assume_a="pos")
    except linalg.LinAlgError as exc:  # R >= delta > 0 makes this unreachable
        raise AssertionError("QP normal matrix is singular") from exc
    aug = np.append(u, 1.0)
    X = Mx @ aug
    Y = My @ aug
    J = 0.5 * (dt * np.sum(Q[:n] * X[:n] ** 2 + S[:n] * Y[:n] ** 2 + R[:n] * u ** 2) + coeffs.G * X[n] ** 2)
    return QPSolution(u, X, float(J))


def riccati_gain(coeffs: LQCoefficients) -> np.ndarray:
    """Riccati solution ``K`` on the grid nodes for the memoryless regulator.

    Integrates ``K' = -(2A + D^2) K - Q + (C K + D H K)^2 / (R + H^2 K)``
    backwards from ``K_T = G`` with RK4, coefficients linearly interpolated
    between nodes.
    """
    if np.any(coeffs.B) or np.any(coeffs.F) or np.any(coeffs.S) or np.any(coeffs.P) or np.any(coeffs.N):
        raise InvalidArgument("the Riccati oracle covers the memoryless case B = F = S = P = N = 0")
    grid = coeffs.grid
    nodes = grid.nodes

    def rhs(t, K):
        A, C, D, H, Q, R = (np.interp(t, nodes, getattr(coeffs, c)) for c in "ACDHQR")
        return -(2 * A + D ** 2) * K - Q + (C * K + D * H * K) ** 2 / (R + H ** 2 * K)

    K = np.empty(grid.n_nodes)
    K[-1] = coeffs.G
    h = -grid.dt
    for i in range(grid.n_steps, 0, -1):
        t, k = nodes[i], K[i]
        k1 = rhs(t, k)
        k2 = rhs(t + h / 2, k + h / 2 * k1)
        k3 = rhs(t + h / 2, k + h / 2 * k2)
        k4 = rhs(t + h, k + h * k3)
        K[i - 1] = k + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return K


def riccati_control(coeffs: LQCoefficients, X) -> np.ndarray:
    """Feedback ``-(C K + D H K) X / (R + H^2 K)`` evaluated on states ``X``."""
    K = riccati_gain(coeffs)
    gain = (coeffs.C * K + coeffs.D * coeffs.H * K) / (coeffs.R + coeffs.H ** 2 * K)
    return -gain * np.asarray(X, dtype=float)


@dataclass
class GapReport:
    lhs: float
    rhs: float
    stderr: float
    holds: bool

    def to_dict(self):
        return {"lhs": self.lhs, "rhs": self.rhs, "stderr": self.stderr, "holds": self.holds}


def uniqueness_gap(coeffs: LQCoefficients, u1, u2, n_paths: int = 1, seed: int = 0,
                   dW: np.ndarray | None = None) -> GapReport:
    """Midpoint convexity ``J(u1) + J(u2) - 2 J(mid)`` against ``delta/4 E int |u1 - u2|^2``."""
    grid = coeffs.grid
    if dW is None:
        dW = brownian_increments(grid, n_paths, seed)
    shape = (dW.shape[0], grid.n_nodes)
    u1 = np.broadcast_to(np.asarray(u1, dtype=float), shape)
    u2 = np.broadcast_to(np.asarray(u2, dtype=float), shape)

    def per_path(u):
        return lq_cost(coeffs, lq_simulate(coeffs, np.array(u), dW=dW))[1]

    lhs = per_path(u1) + per_path(u2) - 2.0 * per_path(0.5 * (u1 + u2))
    rhs = 0.25 * coeffs.delta * ((u1 - u2)[:, :-1] ** 2).sum(axis=1) * grid.dt
    diff = Estimate.from_samples(lhs - rhs)
    return GapReport(float(lhs.mean()), float(rhs.mean()), diff.stderr,
                     bool(diff.value >= -3.0 * diff.stderr))


def bounded_perturbation(rng, ens) -> np.ndarray:
    """Bounded adapted direction: a smooth time profile plus a clipped Brownian term."""
    t = ens.grid.nodes[None, :] / ens.grid.T
    a = rng.uniform(-1.0, 1.0, 4)
    W = np.zeros_like(ens.X)
    W[:, 1:] = np.cumsum(ens.dW, axis=1)
    return a[0] + a[1] * np.sin(np.pi * t) + a[2] * np.cos(2 * np.pi * t) + 0.5 * a[3] * np.clip(W, -1.0, 1.0)


def optimality_check(coeffs: LQCoefficients, sol: LQSolution, betas, eps_values=(0.1, 0.01)) -> list[dict]:
    """``J(u* + eps beta) - J(u*)`` on the solution's own increments, per direction and step."""
    dW = sol.ensemble.dW
    base = lq_cost(coeffs, lq_simulate(coeffs, sol.control, dW=dW))[1]
    out = []
    for j, beta in enumerate(betas):
        for eps in eps_values:
            pert = lq_cost(coeffs, lq_simulate(coeffs, sol.control + eps * np.asarray(beta), dW=dW))[1]
            d = Estimate.from_samples(pert - base)
            out.append({"direction": j, "eps": eps, "dJ": d.value, "stderr": d.stderr,
                        "pass": bool(d.value >= -3.0 * d.stderr)})
    return out
