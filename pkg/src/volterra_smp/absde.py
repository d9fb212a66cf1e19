"""Anticipated backward SDEs solved by Picard iteration and regression Monte Carlo.

The equation is

    -dy = h(t, y, z, E_t[int_t^T k(s,t) a1(s) y_s ds], E_t[int_t^T k(s,t) a2(s) z_s ds]) dt - z dW,
    y_T = xi.

Each Picard iterate freezes the anticipated integrals at the previous
iterate and performs one explicit backward sweep

    yhat_i = E_i[y_{i+1}],  z_i = E_i[y_{i+1} dW_i] / dt,
    y_i    = yhat_i + dt * h(i, yhat_i, z_i, ya_i, za_i),

where conditional expectations are least-squares projections on
polynomial features of the node-``i`` state.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable

import numpy as np
from scipy import linalg

from .errors import InvalidArgument, NonConvergence
from .forward import PathEnsemble
from .grid import Kernel, TimeGrid


class ContractionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RegressionBasis:
    """All monomials of the state variables up to total ``degree``, constant included."""

    degree: int = 2
    ridge: float = 0.0

    def __post_init__(self):
        if self.degree < 0:
            raise InvalidArgument("basis degree must be >= 0")
        if self.ridge < 0:
            raise InvalidArgument("ridge parameter must be >= 0")

    def design(self, variables) -> np.ndarray:
        z = np.asarray(variables, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        cols = [np.ones(z.shape[0])]
        for d in range(1, self.degree + 1):
            for combo in combinations_with_replacement(range(z.shape[1]), d):
                cols.append(np.prod(z[:, combo], axis=1))
        return np.column_stack(cols)

    def dimension(self, n_vars: int) -> int:
        return math.comb(n_vars + self.degree, self.degree)


class NodeRegressor:
    """Least-squares projection onto the span of one node's features.

    Non-constant columns are centred and scaled; columns with no spread
    across paths are dropped (they are already spanned by the constant).
    The Gram matrix is factorised once so many targets can be projected
    cheaply.
    """

    COND_LIMIT = 1e12

    def __init__(self, variables, basis: RegressionBasis):
        D = basis.design(variables)[:, 1:]
        self.n_paths = D.shape[0]
        mu = D.mean(axis=0)
        sd = D.std(axis=0)
        keep = sd > 1e-12 * (1.0 + np.abs(mu))
        self.mu, self.sd = mu[keep], sd[keep]
        self.Z = (D[:, keep] - self.mu) / self.sd
        self.dim = 1 + self.Z.shape[1]
        if self.n_paths <= self.dim:
            raise InvalidArgument(f"need more paths ({self.n_paths}) than basis functions ({self.dim})")
        self.flagged = False
        self.ridge = basis.ridge
        self.cond = 1.0
        self._chol = None
        if self.Z.shape[1]:
            G = self.Z.T @ self.Z / self.n_paths
            self.cond = float(np.linalg.cond(G))
            rho = basis.ridge
            if rho == 0.0 and not self.cond < self.COND_LIMIT:
                rho = 1e-10 * float(np.trace(G))
                self.flagged = True
            self.ridge = rho
            self._chol = linalg.cho_factor(G + rho * np.eye(G.shape[0]))

    def fit(self, targets) -> np.ndarray:
        """Fitted values for one target (shape ``(P,)``) or many (``(P, m)``)."""
        Y = np.asarray(targets, dtype=float)
        mean = Y.mean(axis=0)
        if self._chol is None:
            return np.broadcast_to(mean, Y.shape).copy()
        # Z has zero column means, so centring Y is unnecessary here
        coef = linalg.cho_solve(self._chol, self.Z.T @ Y / self.n_paths)
        return mean + self.Z @ coef

    def diagnostics(self, targets, fitted) -> tuple[np.ndarray, np.ndarray]:
        """R^2 and the standard error of the fitted values, per target."""
        Y = np.asarray(targets, dtype=float)
        res = Y - fitted
        ssr = (res ** 2).sum(axis=0)
        sst = ((Y - Y.mean(axis=0)) ** 2).sum(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            r2 = np.where(sst > 0, 1.0 - ssr / sst, 1.0)
        resid_var = ssr / max(self.n_paths - self.dim, 1)
        return r2, np.sqrt(resid_var * self.dim / self.n_paths)


def build_regressors(ens: PathEnsemble, basis: RegressionBasis) -> list[NodeRegressor]:
    return [NodeRegressor(ens.features(i), basis) for i in range(ens.grid.n_nodes)]


@dataclass
class RegressionFit:
    fitted: np.ndarray
    r2: float
    cond: float
    flagged: bool
    stderr: float


def conditional_expectation(samples, basis: RegressionBasis, features) -> RegressionFit:
    """Projection of ``samples`` on the basis evaluated at ``features``."""
    reg = NodeRegressor(features, basis)
    fitted = reg.fit(samples)
    r2, se = reg.diagnostics(samples, fitted)
    return RegressionFit(fitted, float(r2), reg.cond, reg.flagged, float(se))


@dataclass
class ContractionCheck:
    satisfied: bool
    margin: float


def check_contraction(M1: float, M2: float, T: float) -> ContractionCheck:
    """Sufficient condition ``M1 * M2 < 1 / (8 sqrt(T))`` for the Picard map to contract."""
    if M1 < 0 or M2 < 0 or T <= 0:
        raise InvalidArgument("need M1, M2 >= 0 and T > 0")
    threshold = 1.0 / (8.0 * math.sqrt(T))
    return ContractionCheck(M1 * M2 < threshold, threshold - M1 * M2)


def predicted_ratio(M1: float, M2: float, T: float) -> float:
    """Contraction factor ``4 c3 M1 M2 T / (1 - 4 M1 M2 / c3)`` with ``c3 = T^{-1/2}``."""
    c3 = T ** -0.5
    denom = 1.0 - 4.0 * M1 * M2 / c3
    return 4.0 * c3 * M1 * M2 * T / denom if denom > 0 else math.inf


def anticipated_integral(k: Kernel, a, future, i: int, grid: TimeGrid) -> np.ndarray:
    """``dt * sum_{j > i} k(t_j, t_i) a_j future_j`` for values on nodes ``i..N``.

    ``a`` and ``future`` have a trailing axis of length ``N + 1 - i`` (or the
    full ``N + 1``, in which case the first ``i`` entries are ignored).
    """
    n = grid.n_nodes
    a = np.asarray(a, dtype=float)
    f = np.asarray(future, dtype=float)
    if f.shape[-1] == n and i > 0:
        f = f[..., i:]
    if a.ndim and a.shape[-1] == n and i > 0:
        a = a[..., i:]
    if f.shape[-1] != n - i:
        raise InvalidArgument(f"future values must cover nodes {i}..{grid.n_steps}")
    if i == grid.n_steps:
        return np.zeros(f.shape[:-1])
    tj = grid.nodes[i + 1:]
    w = k._eval(tj, np.full(tj.shape, grid.nodes[i]))
    return ((a * f)[..., 1:] @ w) * grid.dt


def beta_norm(delta_y, delta_z, beta: float, grid: TimeGrid) -> float:
    """``max_i e^{beta t_i} E dy_i^2 + sum_{i<N} e^{beta t_i} E dz_i^2 dt``."""
    w = np.exp(beta * grid.nodes)
    dy = np.mean(np.asarray(delta_y, dtype=float) ** 2, axis=0)
    dz = np.mean(np.asarray(delta_z, dtype=float) ** 2, axis=0)
    dy = np.broadcast_to(dy, (grid.n_nodes,))
    dz = np.broadcast_to(dz, (grid.n_nodes,))
    return float(np.max(w * dy) + np.sum((w * dz)[:-1]) * grid.dt)


@dataclass(eq=False)
class ABSDEProblem:
    """Data of one anticipated BSDE on a fixed forward ensemble.

    ``driver(i, y, z, ya, za)`` is evaluated per node on per-path arrays.
    ``a1``/``a2`` broadcast to ``(n_paths, n_nodes)``. ``forcing`` is an
    optional known integrand whose conditional anticipated integral is
    added to the driver; it leaves the contraction argument unchanged.
    """

    driver: Callable
    terminal: np.ndarray
    kernel: Kernel
    a1: np.ndarray | float = 0.0
    a2: np.ndarray | float = 0.0
    M1: float = 1.0
    M2: float = 0.0
    forcing: np.ndarray | None = None

    def weights(self, shape):
        a1 = np.broadcast_to(np.asarray(self.a1, dtype=float), shape)
        a2 = np.broadcast_to(np.asarray(self.a2, dtype=float), shape)
        return a1, a2

    def check_weights(self, shape, slack: float = 1e-12) -> bool:
        a1, a2 = self.weights(shape)
        return bool(max(np.max(np.abs(a1)), np.max(np.abs(a2))) <= self.M2 * (1 + slack) + slack)


@dataclass(eq=False)
class AdjointEnsemble:
    """Solution of an anticipated BSDE.

    ``y_hat[:, i]`` is the continuation value ``E_i[y_{i+1}]`` (equal to
    ``y`` at the terminal node) and is what the driver was evaluated at;
    ``z[:, N]`` is zero by convention.
    """

    grid: TimeGrid
    y: np.ndarray
    y_hat: np.ndarray
    z: np.ndarray
    r2: np.ndarray
    cond: np.ndarray
    flagged: list[int]
    history: list[float]
    predicted_ratio: float
    converged: bool = True
    extras: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.history)

    @property
    def ratios(self) -> list[float]:
        h = self.history
        return [h[j + 1] / h[j] if h[j] > 0 else 0.0 for j in range(len(h) - 1)]

    def convergence_log(self) -> list[dict]:
        return [{"iteration": m + 1, "beta_norm_delta": d} for m, d in enumerate(self.history)]


def default_beta(M1: float) -> float:
    return 2.0 * (M1 + M1 ** 2) + 1.0


def solve_absde(problem: ABSDEProblem, ens: PathEnsemble, basis: RegressionBasis | None = None,
                beta: float | None = None, tol: float = 1e-10, max_picard: int = 50,
                regressors: list[NodeRegressor] | None = None,
                init: AdjointEnsemble | None = None) -> AdjointEnsemble:
    """Picard iteration for the anticipated BSDE on the paths of ``ens``.

    Iteration stops when the beta-norm of the change between successive
    iterates falls below ``tol``; otherwise :class:`NonConvergence` is
    raised with the full delta history. Starting values are
    ``(mean(xi), 0)`` unless ``init`` supplies a previous solution.
    """
    grid = ens.grid
    P, n = ens.X.shape
    N, dt = grid.n_steps, grid.dt
    basis = basis or RegressionBasis()
    if beta is None:
        beta = default_beta(problem.M1)
    check = check_contraction(problem.M1, problem.M2, grid.T)
    if not check.satisfied:
        warnings.warn(f"M1*M2 = {problem.M1 * problem.M2:.4g} violates the contraction bound "
                      f"{1 / (8 * math.sqrt(grid.T)):.4g}; proceeding", ContractionWarning, stacklevel=2)
    if regressors is None:
        regressors = build_regressors(ens, basis)
    xi = np.asarray(problem.terminal, dtype=float)
    if xi.shape != (P,):
        raise InvalidArgument(f"terminal value must have shape ({P},), got {xi.shape}")
    # column-major storage keeps the per-node slices contiguous
    a1, a2 = (np.asfortranarray(w) for w in problem.weights((P, n)))
    anticipating = bool(np.any(a1) or np.any(a2))
    ftail = np.asfortranarray(problem.kernel.tail(problem.forcing, grid)) if problem.forcing is not None else None
    dW = np.asfortranarray(ens.dW)

    if init is None:
        y = np.full((P, n), xi.mean(), order="F")
        y_hat = y.copy(order="F")
        z = np.zeros((P, n), order="F")
    else:
        y, y_hat, z = (np.asfortranarray(a).copy(order="F") for a in (init.y, init.y_hat, init.z))

    cond = np.array([reg.cond for reg in regressors])
    history: list[float] = []
    for _ in range(max_picard):
        if anticipating:
            tail1 = problem.kernel.tail(a1 * y_hat, grid)
            tail2 = problem.kernel.tail(a2 * z, grid)
        y_new = np.empty((P, n), order="F")
        yh_new = np.empty((P, n), order="F")
        z_new = np.zeros((P, n), order="F")
        y_new[:, N] = xi
        yh_new[:, N] = xi
        zeros = np.zeros(P)
        for i in range(N - 1, -1, -1):
            cols = [y_new[:, i + 1], y_new[:, i + 1] * dW[:, i]]
            if anticipating:
                cols += [tail1[:, i], tail2[:, i]]
            if ftail is not None:
                cols.append(ftail[:, i])
            fitted = regressors[i].fit(np.column_stack(cols))
            yh = fitted[:, 0]
            zi = fitted[:, 1] / dt
            ya = fitted[:, 2] if anticipating else zeros
            za = fitted[:, 3] if anticipating else zeros
            h = np.asarray(problem.driver(i, yh, zi, ya, za), dtype=float)
            if ftail is not None:
                h = h + fitted[:, -1]
            yh_new[:, i] = yh
            z_new[:, i] = zi
            y_new[:, i] = yh + dt * h
        delta = beta_norm(y_new - y, z_new - z, beta, grid)
        history.append(delta)
        y, y_hat, z = y_new, yh_new, z_new
        if not np.isfinite(delta):
            break
        if delta < tol:
            r2 = np.ones((n, 2))
            for i in range(N):
                targets = np.column_stack([y[:, i + 1], y[:, i + 1] * dW[:, i]])
                fitted = np.column_stack([y_hat[:, i], z[:, i] * dt])
                r2[i] = regressors[i].diagnostics(targets, fitted)[0]
            return AdjointEnsemble(grid, np.ascontiguousarray(y), np.ascontiguousarray(y_hat),
                                   np.ascontiguousarray(z), r2, cond,
                                   [i for i, r in enumerate(regressors) if r.flagged], history,
                                   predicted_ratio(problem.M1, problem.M2, grid.T))
    raise NonConvergence(f"anticipated BSDE did not reach beta-norm tolerance {tol} "
                         f"in {len(history)} Picard iterations", history)
