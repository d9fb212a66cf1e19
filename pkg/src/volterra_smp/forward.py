"""Forward simulation of controlled stochastic Volterra integro-differential equations.

The state solves

    dX = b(t, X, Y, u, v) dt + sigma(t, X, Y, u, v) dW,    X_0 = x0,

with memories ``Y = int_0^t k(t,s) X_s ds`` and ``v = int_0^t l(t,s) u_s ds``,
discretised by Euler-Maruyama on a :class:`~volterra_smp.grid.TimeGrid`.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import InvalidArgument, SimulationDiverged
from .grid import Kernel, TimeGrid

ARGS = ("x", "y", "u", "v")
BLOCK_SIZE = 1024     # paths per seed block; fixed so results never depend on workers
CHUNK_SIZE = 4096     # paths per simulation task


def central_difference(fn, args, pos, h_fd=1e-5):
    """Central difference of ``fn(*args)`` in argument ``pos``, step ``h_fd (1 + |arg|)``."""
    a = np.asarray(args[pos], dtype=float)
    h = h_fd * (1.0 + np.abs(a))
    up = list(args)
    dn = list(args)
    up[pos] = a + h
    dn[pos] = a - h
    return (np.asarray(fn(*up)) - np.asarray(fn(*dn))) / (2.0 * h)


@dataclass(frozen=True)
class CoefficientSet:
    """Drift ``b`` and diffusion ``sigma`` as vectorised functions of ``(t, x, y, u, v)``.

    ``derivatives`` may supply any of ``b_x, b_y, b_u, b_v, sigma_x, ...``;
    the rest are taken by central differences. ``L`` is the declared
    growth/Lipschitz constant.
    """

    b: Callable
    sigma: Callable
    L: float = 1.0
    derivatives: Mapping[str, Callable] = field(default_factory=dict)
    h_fd: float = 1e-5

    def partial(self, name: str, var: str, t, x, y, u, v):
        fn = getattr(self, name)
        d = self.derivatives.get(f"{name}_{var}")
        if d is not None:
            return np.broadcast_to(np.asarray(d(t, x, y, u, v), dtype=float), np.broadcast(x, y, u, v).shape)
        return central_difference(fn, (t, x, y, u, v), 1 + ARGS.index(var), self.h_fd)

    def along(self, ens: "PathEnsemble") -> dict[str, np.ndarray]:
        """Every first partial of ``b`` and ``sigma`` evaluated along ``ens``."""
        t = ens.grid.nodes[None, :]
        out = {}
        for name in ("b", "sigma"):
            for var in ARGS:
                out[f"{name}_{var}"] = np.asarray(
                    self.partial(name, var, t, ens.X, ens.Y, ens.u, ens.v), dtype=float) * np.ones_like(ens.X)
        return out


@dataclass(frozen=True, eq=False)
class ControlSpec:
    """Open-loop values per node (shared or per path), or a feedback ``(t, x, y) -> u``."""

    values: np.ndarray | None = None
    feedback: Callable | None = None
    bounds: tuple[float, float] = (-np.inf, np.inf)

    def __post_init__(self):
        lo, hi = self.bounds
        if lo > hi:
            raise InvalidArgument(f"empty admissible set [{lo}, {hi}]")
        if (self.values is None) == (self.feedback is None):
            raise InvalidArgument("a control is either open-loop values or a feedback, not both")
        if self.values is not None:
            vals = np.array(self.values, dtype=float)
            if np.any(vals < lo) or np.any(vals > hi) or not np.all(np.isfinite(vals)):
                raise InvalidArgument(f"open-loop control leaves the admissible set [{lo}, {hi}]")
            vals.setflags(write=False)
            object.__setattr__(self, "values", vals)

    @classmethod
    def open_loop(cls, values, bounds=(-np.inf, np.inf)) -> "ControlSpec":
        return cls(values=values, bounds=tuple(bounds))

    @classmethod
    def from_feedback(cls, fn, bounds=(-np.inf, np.inf)) -> "ControlSpec":
        return cls(feedback=fn, bounds=tuple(bounds))

    @classmethod
    def zero(cls) -> "ControlSpec":
        return cls(values=np.zeros(1))

    def emit(self, i, t, x, y, rows=slice(None)):
        if self.values is not None:
            vals = self.values
            if vals.ndim == 1:
                col = vals[0] if vals.shape[0] == 1 else vals[i]
                return np.full(np.shape(x), col)
            return np.array(vals[rows, i], dtype=float)
        u = np.asarray(self.feedback(t, x, y), dtype=float) * np.ones(np.shape(x))
        return np.clip(u, *self.bounds)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Monte-Carlo sample of the state bundle on a grid.

    All process arrays have shape ``(n_paths, n_steps + 1)``; ``dW`` has
    shape ``(n_paths, n_steps)`` and is kept so later runs can reuse it.
    """

    grid: TimeGrid
    X: np.ndarray
    Y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    dW: np.ndarray
    seed: int | None = None

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    def features(self, i: int) -> np.ndarray:
        """State variables available at node ``i`` for regression."""
        return np.column_stack([self.X[:, i], self.Y[:, i], self.v[:, i]])


def brownian_increments(grid: TimeGrid, n_paths: int, seed: int) -> np.ndarray:
    """Brownian increments of shape ``(n_paths, n_steps)``.

    Paths are generated in fixed blocks of ``BLOCK_SIZE``, block ``b`` drawing
    from ``SeedSequence(seed, spawn_key=(b,))``, so path ``p`` depends only
    on ``(seed, p, n_steps)``.
    """
    if n_paths < 1:
        raise InvalidArgument(f"n_paths must be positive, got {n_paths}")
    out = np.empty((n_paths, grid.n_steps))
    sd = np.sqrt(grid.dt)
    for b, start in enumerate(range(0, n_paths, BLOCK_SIZE)):
        stop = min(start + BLOCK_SIZE, n_paths)
        rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(b,)))
        out[start:stop] = rng.standard_normal((BLOCK_SIZE, grid.n_steps))[: stop - start] * sd
    return out


def coarsen(dW: np.ndarray, factor: int = 2) -> np.ndarray:
    """Sum consecutive increments, coupling a fine path with its coarse version."""
    n_paths, n = dW.shape
    if n % factor:
        raise InvalidArgument("number of steps is not divisible by the coarsening factor")
    return dW.reshape(n_paths, n // factor, factor).sum(axis=2)


def _simulate_chunk(coeffs, k, l, control, grid, x0, dW, rows):
    n_paths = dW.shape[0]
    n = grid.n_nodes
    dt = grid.dt
    t = grid.nodes
    X = np.empty((n_paths, n))
    Y = np.empty((n_paths, n))
    u = np.empty((n_paths, n))
    v = np.empty((n_paths, n))
    kmem, lmem = k.memory(grid), l.memory(grid)
    X[:, 0] = x0
    with np.errstate(all="ignore"):
        for i in range(n):
            Y[:, i] = kmem.step(X[:, i])
            u[:, i] = control.emit(i, t[i], X[:, i], Y[:, i], rows)
            v[:, i] = lmem.step(u[:, i])
            if i == grid.n_steps:
                break
            drift = coeffs.b(t[i], X[:, i], Y[:, i], u[:, i], v[:, i])
            diff = coeffs.sigma(t[i], X[:, i], Y[:, i], u[:, i], v[:, i])
            X[:, i + 1] = X[:, i] + drift * dt + diff * dW[:, i]
            bad = ~np.isfinite(X[:, i + 1])
            if bad.any():
                return (i + 1, rows.start + int(np.argmax(bad))), None
    return None, (X, Y, u, v)


def simulate_svide(coeffs: CoefficientSet, k: Kernel, l: Kernel, control: ControlSpec,
                   grid: TimeGrid, n_paths: int, seed: int, x0: float = 1.0,
                   dW: np.ndarray | None = None, workers: int = 1) -> PathEnsemble:
    """Euler-Maruyama simulation of the controlled state.

    Pass ``dW`` to reuse Brownian increments (common random numbers); it
    then overrides ``n_paths`` and ``seed`` only labels the ensemble.
    ``workers`` only changes how path chunks are scheduled.
    """
    if dW is None:
        dW = brownian_increments(grid, n_paths, seed)
    else:
        dW = np.asarray(dW, dtype=float)
        if dW.ndim != 2 or dW.shape[1] != grid.n_steps:
            raise InvalidArgument(f"dW must have shape (n_paths, {grid.n_steps}), got {dW.shape}")
        n_paths = dW.shape[0]
    vals = control.values
    if vals is not None and vals.ndim == 2 and vals.shape != (n_paths, grid.n_nodes):
        raise InvalidArgument(f"open-loop control has shape {vals.shape}, expected {(n_paths, grid.n_nodes)}")
    if vals is not None and vals.ndim == 1 and vals.shape[0] not in (1, grid.n_nodes):
        raise InvalidArgument(f"open-loop control needs 1 or {grid.n_nodes} values, got {vals.shape[0]}")

    chunks = [slice(s, min(s + CHUNK_SIZE, n_paths)) for s in range(0, n_paths, CHUNK_SIZE)]

    def task(rows):
        return _simulate_chunk(coeffs, k, l, control, grid, x0, dW[rows], rows)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(task, chunks))
    else:
        results = [task(rows) for rows in chunks]

    failures = [f for f, _ in results if f is not None]
    if failures:
        node, path = min(failures)
        raise SimulationDiverged(path, node)
    X, Y, u, v = (np.concatenate([r[j] for _, r in results]) for j in range(4))
    return PathEnsemble(grid, X, Y, u, v, dW, seed)


@dataclass
class PicardReport:
    deltas: list[float]
    contraction_failure: bool = False

    @property
    def ratios(self) -> list[float]:
        d = self.deltas
        return [d[j + 1] / d[j] if d[j] > 0 else 0.0 for j in range(len(d) - 1)]


def picard_iterate(coeffs: CoefficientSet, k: Kernel, grid: TimeGrid, n_paths: int,
                   seed: int, n_iter: int, x0: float = 1.0) -> PicardReport:
    """Successive approximations for the uncontrolled equation.

    Starting from ``X^(0) = x0``, each iterate is
    ``X^(m+1)_i = x0 + sum_{j<i} b(X^(m)_j, Y^(m)_j) dt + sigma(...) dW_j`` on
    shared increments. Returns ``sup_i E|X^(m+1)_i - X^(m)_i|^2`` for each
    iterate. If the deltas grow three times in a row the run stops and is
    flagged as a contraction failure.
    """
    if n_iter < 1:
        raise InvalidArgument("n_iter must be at least 1")
    dW = brownian_increments(grid, n_paths, seed)
    t = grid.nodes[None, :-1]
    X = np.full((n_paths, grid.n_nodes), float(x0))
    zeros = np.zeros((n_paths, grid.n_steps))
    deltas: list[float] = []
    growth = 0
    with np.errstate(all="ignore"):
        for _ in range(n_iter):
            Y = k.quadrature(X, grid)
            xs, ys = X[:, :-1], Y[:, :-1]
            incr = coeffs.b(t, xs, ys, zeros, zeros) * grid.dt + coeffs.sigma(t, xs, ys, zeros, zeros) * dW
            X_new = np.empty_like(X)
            X_new[:, 0] = x0
            X_new[:, 1:] = x0 + np.cumsum(incr, axis=1)
            d = float(np.max(np.mean((X_new - X) ** 2, axis=0)))
            if not np.isfinite(d):
                return PicardReport(deltas + [d], contraction_failure=True)
            if deltas and d > deltas[-1]:
                growth += 1
            else:
                growth = 0
            deltas.append(d)
            X = X_new
            if growth >= 3:
                return PicardReport(deltas, contraction_failure=True)
    return PicardReport(deltas)


def simulate_variational(coeffs: CoefficientSet, ens: PathEnsemble, beta, k: Kernel,
                         l: Kernel) -> np.ndarray:
    """First-order sensitivity ``V`` of the state to the control direction ``beta``.

    Solves the linearised equation along ``ens`` with ``V_0 = 0`` on the
    ensemble's own Brownian increments.
    """
    grid = ens.grid
    beta = np.broadcast_to(np.asarray(beta, dtype=float), ens.X.shape)
    d = coeffs.along(ens)
    Lb = l.quadrature(beta, grid)
    kmem = k.memory(grid)
    V = np.zeros_like(ens.X)
    for i in range(grid.n_steps):
        KV = kmem.step(V[:, i])
        drift = d["b_x"][:, i] * V[:, i] + d["b_y"][:, i] * KV + d["b_u"][:, i] * beta[:, i] + d["b_v"][:, i] * Lb[:, i]
        diff = (d["sigma_x"][:, i] * V[:, i] + d["sigma_y"][:, i] * KV + d["sigma_u"][:, i] * beta[:, i]
                + d["sigma_v"][:, i] * Lb[:, i])
        V[:, i + 1] = V[:, i] + drift * grid.dt + diff * ens.dW[:, i]
    return V


@dataclass
class ConditionReport:
    growth_ok: bool
    lipschitz_ok: bool
    worst_growth_ratio: float
    worst_lipschitz_ratio: float
    growth_witness: dict
    lipschitz_witness: dict

    @property
    def worst_ratio(self) -> float:
        return max(self.worst_growth_ratio, self.worst_lipschitz_ratio)

    def to_dict(self) -> dict:
        return {
            "growth_ok": self.growth_ok,
            "lipschitz_ok": self.lipschitz_ok,
            "worst_growth_ratio": self.worst_growth_ratio,
            "worst_lipschitz_ratio": self.worst_lipschitz_ratio,
            "growth_witness": self.growth_witness,
            "lipschitz_witness": self.lipschitz_witness,
        }


def check_conditions(coeffs: CoefficientSet, probe_count: int = 2000, box=(-10.0, 10.0),
                     seed: int = 0, T: float = 1.0, eps_check: float = 1e-9) -> ConditionReport:
    """Spot-check linear growth and Lipschitz bounds on random probes.

    Both bounds are tested in all four arguments ``(x, y, u, v)``.
    """
    rng = np.random.default_rng(seed)
    lo, hi = box
    t = rng.uniform(0.0, T, probe_count)
    P1 = rng.uniform(lo, hi, (4, probe_count))
    P2 = rng.uniform(lo, hi, (4, probe_count))
    with np.errstate(all="ignore"):
        size1 = 1.0 + (P1 ** 2).sum(axis=0)
        gap = ((P1 - P2) ** 2).sum(axis=0)
        g_ratio = np.zeros(probe_count)
        l_ratio = np.zeros(probe_count)
        for fn in (coeffs.b, coeffs.sigma):
            v1 = np.broadcast_to(np.asarray(fn(t, *P1), dtype=float), t.shape)
            v2 = np.broadcast_to(np.asarray(fn(t, *P2), dtype=float), t.shape)
            g_ratio = np.maximum(g_ratio, v1 ** 2 / (coeffs.L * size1))
            l_ratio = np.maximum(l_ratio, np.where(gap > 0, (v1 - v2) ** 2 / (coeffs.L * gap), 0.0))
    gi, li = int(np.nanargmax(g_ratio)), int(np.nanargmax(l_ratio))

    def point(P, j):
        return {"t": float(t[j]), **{a: float(P[n, j]) for n, a in enumerate(ARGS)}}

    return ConditionReport(
        growth_ok=bool(g_ratio[gi] <= 1.0 + eps_check),
        lipschitz_ok=bool(l_ratio[li] <= 1.0 + eps_check),
        worst_growth_ratio=float(g_ratio[gi]),
        worst_lipschitz_ratio=float(l_ratio[li]),
        growth_witness=point(P1, gi),
        lipschitz_witness={"first": point(P1, li), "second": point(P2, li)},
    )
