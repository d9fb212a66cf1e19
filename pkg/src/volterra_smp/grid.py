"""Uniform time grids, Volterra kernels and the rectangle quadratures on them.

Every process in the package lives on a :class:`TimeGrid` as an array whose
last axis has ``n_steps + 1`` entries. Memory terms use the left rectangle
rule

    Y_i = dt * sum_{j < i} k(t_i, t_j) X_j,      Y_0 = X_0,

which keeps ``Y_i`` a function of strictly earlier nodes. The backward
(anticipated) direction uses the transposed weights

    tail_i = dt * sum_{j > i} k(t_j, t_i) c_j,

so that ``sum_i c_i Y_i`` and ``sum_j X_j tail_j`` agree to rounding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import InvalidArgument, SingularKernelError

_CAUSAL_SLACK = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of ``[0, T]`` into ``n_steps`` intervals."""

    T: float
    n_steps: int

    def __post_init__(self):
        if not (isinstance(self.T, (int, float)) and math.isfinite(self.T) and self.T > 0):
            raise InvalidArgument(f"horizon T must be a positive finite number, got {self.T!r}")
        if isinstance(self.n_steps, bool) or not isinstance(self.n_steps, (int, np.integer)) or self.n_steps < 1:
            raise InvalidArgument(f"n_steps must be a positive integer, got {self.n_steps!r}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    @cached_property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.n_nodes) * self.dt
        t[-1] = self.T
        t.setflags(write=False)
        return t

    def index(self, t: float) -> int:
        """Index of the node equal to ``t``; raises if ``t`` is not a node."""
        i = int(round(t / self.dt))
        if i < 0 or i > self.n_steps or abs(self.nodes[i] - t) > 1e-9 * max(1.0, self.T):
            raise InvalidArgument(f"t={t!r} is not a node of {self}")
        return i

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.n_steps * factor)


def make_uniform_grid(T: float, N: int) -> TimeGrid:
    return TimeGrid(T, N)


class Kernel:
    """Base class for Volterra kernels ``k(t, s)``, ``s <= t``.

    Subclasses implement ``_eval`` and may override the vectorised
    quadratures with faster recursions; the defaults go through the dense
    weight matrix.
    """

    kind: str = "abstract"
    l1_bound: float | None = None

    def _eval(self, t, s):
        raise NotImplementedError

    def __call__(self, t, s):
        t = np.asarray(t, dtype=float)
        s = np.asarray(s, dtype=float)
        if np.any(s > t + _CAUSAL_SLACK):
            raise InvalidArgument("Volterra kernels are only defined for s <= t")
        out = self._eval(t, s)
        return float(out) if np.ndim(out) == 0 else out

    def matrix(self, grid: TimeGrid) -> np.ndarray:
        """Strictly lower-triangular ``W[i, j] = k(t_i, t_j)`` for ``j < i``."""
        n = grid.n_nodes
        W = np.zeros((n, n))
        t = grid.nodes
        for i in range(1, n):
            W[i, :i] = self._eval(np.full(i, t[i]), t[:i])
        return W

    def quadrature(self, samples, grid: TimeGrid) -> np.ndarray:
        """Memory values ``Y_i`` at every node for samples known at all nodes."""
        x = np.asarray(samples, dtype=float)
        W = self.matrix(grid)
        out = (x @ W.T) * grid.dt
        out[..., 0] = x[..., 0]
        return out

    def tail(self, values, grid: TimeGrid) -> np.ndarray:
        """Right tail ``dt * sum_{j > i} k(t_j, t_i) values_j`` at every node ``i``."""
        c = np.asarray(values, dtype=float)
        return (c @ self.matrix(grid)) * grid.dt

    def memory(self, grid: TimeGrid) -> "_Memory":
        return _DenseMemory(self.matrix(grid), grid.dt)

    def row_l1(self, grid: TimeGrid) -> np.ndarray:
        """Left-rule estimate of ``int_0^{t_i} |k(t_i, s)| ds`` for every node."""
        return np.abs(self.matrix(grid)).sum(axis=1) * grid.dt

    def check_l1(self, grid: TimeGrid, rtol: float = 1e-2) -> tuple[float, bool]:
        """Largest row integral on the grid, and whether it respects ``l1_bound``."""
        worst = float(self.row_l1(grid).max())
        if self.l1_bound is None:
            return worst, True
        return worst, worst <= self.l1_bound * (1.0 + rtol)

    def to_dict(self) -> dict:
        raise NotImplementedError


class _Memory:
    """Streaming evaluator of ``Y_i``; feed samples node by node."""

    def __init__(self):
        self.i = 0

    def step(self, x):
        x = np.asarray(x, dtype=float)
        y = x.copy() if self.i == 0 else self._value()
        self._push(x)
        self.i += 1
        return y


class _DenseMemory(_Memory):
    def __init__(self, W, dt):
        super().__init__()
        self.W = W
        self.dt = dt
        self.past = []

    def _value(self):
        row = self.W[self.i]
        acc = np.zeros_like(self.past[0])
        for j, xj in enumerate(self.past):
            acc += row[j] * xj
        return acc * self.dt

    def _push(self, x):
        self.past.append(x)


class _RankOneMemory(_Memory):
    """Memory for separable kernels ``k(t, s) = phi(t) psi(s)``."""

    def __init__(self, phi, psi, dt):
        super().__init__()
        self.phi, self.psi, self.dt = phi, psi, dt
        self.acc = None

    def _value(self):
        return self.phi[self.i] * self.dt * self.acc

    def _push(self, x):
        term = self.psi[self.i] * x
        self.acc = term if self.acc is None else self.acc + term


class _ExponentialMemory(_Memory):
    def __init__(self, decay, dt):
        super().__init__()
        self.decay, self.dt = decay, dt
        self.acc = None

    def _value(self):
        return self.dt * self.acc

    def _push(self, x):
        self.acc = self.decay * (x if self.acc is None else self.acc + x)


class _RankOneKernel(Kernel):
    def _phi(self, t):
        raise NotImplementedError

    def _psi(self, s):
        raise NotImplementedError

    def _factors(self, grid):
        t = grid.nodes
        phi = np.zeros(grid.n_nodes)
        phi[1:] = self._phi(t[1:])
        return phi, self._psi(t)

    def quadrature(self, samples, grid):
        x = np.asarray(samples, dtype=float)
        phi, psi = self._factors(grid)
        acc = np.cumsum(x * psi, axis=-1)
        out = np.empty_like(x)
        out[..., 1:] = phi[1:] * grid.dt * acc[..., :-1]
        out[..., 0] = x[..., 0]
        return out

    def tail(self, values, grid):
        c = np.asarray(values, dtype=float)
        phi, psi = self._factors(grid)
        rev = np.cumsum((c * phi)[..., ::-1], axis=-1)[..., ::-1]
        out = np.zeros_like(c)
        out[..., :-1] = psi[:-1] * grid.dt * rev[..., 1:]
        return out

    def memory(self, grid):
        phi, psi = self._factors(grid)
        return _RankOneMemory(phi, psi, grid.dt)


@dataclass(frozen=True)
class ConstantKernel(_RankOneKernel):
    c: float = 1.0
    l1_bound: float | None = None
    kind = "constant"

    def _eval(self, t, s):
        return np.full(np.broadcast(t, s).shape, float(self.c))

    def _phi(self, t):
        return np.full(np.shape(t), float(self.c))

    def _psi(self, s):
        return np.ones(np.shape(s))

    def to_dict(self):
        return {"kind": "constant", "c": self.c, "l1_bound": self.l1_bound}


@dataclass(frozen=True)
class FractionalAverageKernel(_RankOneKernel):
    """``k(t, s) = 1/t``: the running average of the past."""

    l1_bound: float | None = 1.0
    kind = "fractional_average"

    def _eval(self, t, s):
        if np.any(t <= 0):
            raise SingularKernelError("the 1/t kernel is singular at t = 0")
        return np.broadcast_to(1.0 / t, np.broadcast(t, s).shape).copy()

    def _phi(self, t):
        return 1.0 / t

    def _psi(self, s):
        return np.ones(np.shape(s))

    def to_dict(self):
        return {"kind": "fractional_average", "l1_bound": self.l1_bound}


@dataclass(frozen=True)
class ExponentialKernel(Kernel):
    """``k(t, s) = exp(-lam (t - s))``."""

    lam: float = 1.0
    l1_bound: float | None = None
    kind = "exponential"

    def _eval(self, t, s):
        return np.exp(-self.lam * (t - s))

    def quadrature(self, samples, grid):
        x = np.asarray(samples, dtype=float)
        decay = math.exp(-self.lam * grid.dt)
        out = np.empty_like(x)
        out[..., 0] = x[..., 0]
        acc = np.zeros_like(x[..., 0])
        for i in range(1, grid.n_nodes):
            acc = decay * (acc + x[..., i - 1])
            out[..., i] = grid.dt * acc
        return out

    def tail(self, values, grid):
        c = np.asarray(values, dtype=float)
        decay = math.exp(-self.lam * grid.dt)
        out = np.zeros_like(c)
        acc = np.zeros_like(c[..., 0])
        for i in range(grid.n_steps - 1, -1, -1):
            acc = decay * (acc + c[..., i + 1])
            out[..., i] = grid.dt * acc
        return out

    def memory(self, grid):
        return _ExponentialMemory(math.exp(-self.lam * grid.dt), grid.dt)

    def to_dict(self):
        return {"kind": "exponential", "lam": self.lam, "l1_bound": self.l1_bound}


@dataclass(frozen=True, eq=False)
class TableKernel(Kernel):
    """Kernel tabulated on the nodes of one grid.

    ``values[i, j]`` holds ``k(t_i, t_j)`` for ``j <= i``; entries above the
    diagonal are ignored and stored as zero.
    """

    grid: TimeGrid
    values: np.ndarray = field(repr=False)
    l1_bound: float | None = None
    kind = "table"

    def __post_init__(self):
        v = np.tril(np.array(self.values, dtype=float))
        n = self.grid.n_nodes
        if v.shape != (n, n):
            raise InvalidArgument(f"table kernel needs a {n}x{n} array, got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def _check_grid(self, grid):
        if grid != self.grid:
            raise InvalidArgument("table kernel used on a grid other than the one it was tabulated on")

    def _eval(self, t, s):
        ti = np.rint(np.asarray(t) / self.grid.dt).astype(int)
        sj = np.rint(np.asarray(s) / self.grid.dt).astype(int)
        off = np.abs(ti * self.grid.dt - t) + np.abs(sj * self.grid.dt - s)
        if np.any(off > 1e-9 * max(1.0, self.grid.T)) or np.any(ti > self.grid.n_steps) or np.any(sj < 0):
            raise InvalidArgument("table kernel can only be evaluated at grid nodes")
        return self.values[ti, sj]

    def matrix(self, grid):
        self._check_grid(grid)
        return np.tril(self.values, k=-1)

    def to_dict(self):
        return {"kind": "table", "values": self.values.tolist(), "l1_bound": self.l1_bound}


def kernel_eval(k: Kernel, t: float, s: float) -> float:
    return k(t, s)


def kernel_row_l1(k: Kernel, t: float, grid: TimeGrid) -> float:
    """Quadrature estimate of ``int_0^t |k(t, s)| ds`` at the grid node ``t``."""
    i = grid.index(t)
    if i == 0:
        return 0.0
    s = grid.nodes[:i]
    return float(np.abs(k._eval(np.full(i, grid.nodes[i]), s)).sum() * grid.dt)


def volterra_quadrature(k: Kernel, samples, i: int, grid: TimeGrid):
    """Left-rectangle approximation of ``int_0^{t_i} k(t_i, s) X_s ds``.

    Reads only ``samples[..., :i]`` (and ``samples[..., 0]`` when ``i == 0``,
    where the value is ``X_0`` by convention). Works on a trailing node axis,
    so per-path arrays of shape ``(n_paths, >= i+1)`` are fine.
    """
    if i < 0 or i > grid.n_steps:
        raise InvalidArgument(f"node index {i} outside 0..{grid.n_steps}")
    x = np.asarray(samples, dtype=float)
    if i == 0:
        return x[..., 0]
    w = k._eval(np.full(i, grid.nodes[i]), grid.nodes[:i])
    return (x[..., :i] @ w) * grid.dt


def memory_adjoint(k: Kernel, values, grid: TimeGrid) -> np.ndarray:
    """Exact transpose of :meth:`Kernel.quadrature` under the left-rule time sum.

    Returns ``a`` such that ``sum_{i<N} c_i Y_i dt == sum_j X_j a_j dt`` for
    every ``X`` with ``Y = k.quadrature(X)``. Apart from the right tail this
    carries a unit atom at node 0 coming from the ``Y_0 = X_0`` row; the
    value at node ``N`` of ``values`` does not enter.
    """
    c = np.array(values, dtype=float, copy=True)
    c[..., -1] = 0.0
    out = k.tail(c, grid)
    out[..., 0] += c[..., 0]
    return out


def kernel_from_dict(spec: dict, grid: TimeGrid | None = None) -> Kernel:
    """Build a kernel from a scenario record such as ``{"kind": "constant", "c": 1}``."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    l1 = spec.pop("l1_bound", None)
    if kind == "constant":
        return ConstantKernel(c=float(spec.pop("c", 1.0)), l1_bound=l1)
    if kind == "exponential":
        return ExponentialKernel(lam=float(spec.pop("lam")), l1_bound=l1)
    if kind == "fractional_average":
        return FractionalAverageKernel(l1_bound=1.0 if l1 is None else l1)
    if kind == "table":
        if grid is None:
            raise InvalidArgument("table kernels need the grid they are tabulated on")
        return TableKernel(grid, np.asarray(spec.pop("values")), l1_bound=l1)
    if kind == "zero":
        return ConstantKernel(c=0.0, l1_bound=0.0 if l1 is None else l1)
    raise InvalidArgument(f"unknown kernel kind {kind!r}")
