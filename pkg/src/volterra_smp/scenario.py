"""Scenario files: YAML in, validated canonical form out.

A scenario names the problem kind, the grid, both kernels, the model
(coefficient and cost families for general problems, coefficient values
for linear-quadratic ones), the control, Monte-Carlo sizes and solver
settings. Every section has a fixed set of keys; anything else is
rejected with a suggestion for the closest valid key. Missing optional
keys get defaults, so the canonical form is complete and hashing it gives
a stable identity for a run.
"""
from __future__ import annotations

import copy
import difflib
import hashlib
import json
import math
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .errors import ScenarioError
from .forward import CoefficientSet, ControlSpec
from .grid import Kernel, TimeGrid, kernel_from_dict
from .lq import COEFFICIENTS, LQCoefficients
from .smp import ControlProblem, CostSpec

KINDS = ("svide", "smp-check", "lq")
MISSING = object()


# field validators: each takes (value, where) and returns the normalised value

def _number(v, where):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"{where}: expected a number, got {v!r}")
    v = float(v)
    if not math.isfinite(v):
        raise ScenarioError(f"{where}: must be finite")
    return v


def real(lo=-math.inf, hi=math.inf, lo_open=False, hi_open=False):
    def check(v, where):
        v = _number(v, where)
        bad_lo = v <= lo if lo_open else v < lo
        bad_hi = v >= hi if hi_open else v > hi
        if bad_lo or bad_hi:
            lb = "(" if lo_open else "["
            rb = ")" if hi_open else "]"
            raise ScenarioError(f"{where}: {v} outside the allowed range {lb}{lo}, {hi}{rb}")
        return v
    return check


def integer(lo, hi=2 ** 64 - 1):
    def check(v, where):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ScenarioError(f"{where}: expected an integer, got {v!r}")
        if not lo <= v <= hi:
            raise ScenarioError(f"{where}: {v} outside the allowed range [{lo}, {hi}]")
        return v
    return check


def optional(check):
    def wrapped(v, where):
        return None if v is None else check(v, where)
    return wrapped


def choice(*options):
    def check(v, where):
        if v not in options:
            hint = difflib.get_close_matches(str(v), options, n=1)
            extra = f"; did you mean {hint[0]!r}?" if hint else ""
            raise ScenarioError(f"{where}: {v!r} is not one of {list(options)}{extra}")
        return v
    return check


def int_list(lo):
    def check(v, where):
        if not isinstance(v, list) or not v:
            raise ScenarioError(f"{where}: expected a non-empty list of integers")
        return [integer(lo)(x, f"{where}[{j}]") for j, x in enumerate(v)]
    return check


def real_list(v, where):
    if not isinstance(v, list) or not v:
        raise ScenarioError(f"{where}: expected a non-empty list of numbers")
    return [_number(x, f"{where}[{j}]") for j, x in enumerate(v)]


def series(lo=-math.inf):
    """A scalar or one value per grid node (length checked once the grid is known)."""
    def check(v, where):
        vals = real_list(v, where) if isinstance(v, list) else [_number(v, where)]
        for j, x in enumerate(vals):
            if x < lo:
                raise ScenarioError(f"{where}: value {x} at position {j} is below the allowed minimum {lo}")
        return vals if isinstance(v, list) else vals[0]
    return check


def _unknown(keys, allowed, where):
    for key in keys:
        if key not in allowed:
            hint = difflib.get_close_matches(str(key), list(allowed), n=1)
            extra = f"; did you mean {hint[0]!r}?" if hint else ""
            raise ScenarioError(f"{where}: unknown key {key!r}{extra}")


def _section(raw, schema, where):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ScenarioError(f"{where}: expected a mapping")
    _unknown(raw, schema, where)
    out = {}
    for key, (default, check) in schema.items():
        if key in raw:
            out[key] = check(raw[key], f"{where}.{key}")
        elif default is MISSING:
            raise ScenarioError(f"{where}: missing required key {key!r}")
        else:
            out[key] = copy.deepcopy(default)
    return out


GRID = {"T": (MISSING, real(0, lo_open=True)), "N": (MISSING, integer(1, 10 ** 6))}

KERNEL_KEYS = {
    "zero": {},
    "constant": {"c": (1.0, real())},
    "exponential": {"lam": (MISSING, real(0))},
    "fractional_average": {},
    "table": {"values": (MISSING, lambda v, w: [real_list(r, f"{w}[{j}]") for j, r in enumerate(v)]
                         if isinstance(v, list) else real_list(v, w))},
}

FAMILIES = {
    # b = b0 + bx x + by y + bu u + bv v,  sigma = s0 + sx x + sy y + su u + sv v
    "linear": ("b0", "bx", "by", "bu", "bv", "s0", "sx", "sy", "su", "sv"),
    # b = bx x + by sin(y) + bu u + bv sin(v),  sigma = s0 + sx x + sy sin(y) + su u + sv v
    "sine_memory": ("bx", "by", "bu", "bv", "s0", "sx", "sy", "su", "sv"),
}

COST_PARAMS = ("qx", "qy", "r", "rv", "gx", "target")

CONTROL_KEYS = {
    "zero": {},
    "constant": {"value": (MISSING, real())},
    "sinusoid": {"offset": (0.0, real()), "amplitude": (MISSING, real()),
                 "frequency": (1.0, real(0)), "phase": (0.0, real())},
    "open_loop": {"values": (MISSING, real_list)},
    "linear_feedback": {"offset": (0.0, real()), "kx": (0.0, real()), "ky": (0.0, real())},
}

MONTE_CARLO = {"n_paths": (10000, integer(1, 10 ** 8)), "seed": (0, integer(0))}

SOLVER = {
    "basis_degree": (2, integer(1, 4)),
    "ridge": (0.0, real(0)),
    "beta": (None, optional(real(0, lo_open=True))),
    "tol": (1e-8, real(0, lo_open=True)),
    "picard_tol": (1e-12, real(0, lo_open=True)),
    "max_picard": (50, integer(1, 10000)),
    "damping": (0.5, real(0, 1, lo_open=True)),
    "max_outer": (500, integer(1, 10 ** 6)),
    "picard_iterations": (10, integer(1, 1000)),
    "fd_eps": (1e-3, real(0, lo_open=True)),
    "directions": (5, integer(0, 10000)),
    "direction_seed": (0, integer(0)),
}

CHECKS = {
    "perturbations": (0, integer(0, 100000)),
    "eps": ([0.1, 0.01], real_list),
    "pairs": (0, integer(0, 100000)),
    "shift": (0.1, real(0, lo_open=True)),
}

CONVERGENCE = {"N": ([100, 200, 400], int_list(1)), "reference_factor": (2, integer(2, 64))}

LQ = {name: (1.0 if name == "R" else 0.0, series(0.0 if name in "QSR" else -math.inf))
      for name in COEFFICIENTS}
LQ.update({"G": (1.0, real(0, lo_open=True)), "delta": (None, optional(real(0, lo_open=True)))})

TOP = ("kind", "name", "grid", "x0", "kernels", "dynamics", "cost", "control", "bounds",
       "lq", "monte_carlo", "solver", "checks", "convergence", "candidates")


def _kernel(raw, where):
    if not isinstance(raw, dict) or "kind" not in raw:
        raise ScenarioError(f"{where}: expected a mapping with a 'kind'")
    kind = choice(*KERNEL_KEYS)(raw["kind"], f"{where}.kind")
    body = _section({k: v for k, v in raw.items() if k not in ("kind", "l1_bound")},
                    KERNEL_KEYS[kind], where)
    l1 = optional(real(0))(raw.get("l1_bound"), f"{where}.l1_bound")
    return {"kind": kind, **body, "l1_bound": l1}


def _control(raw, where):
    if raw is None:
        raw = {"kind": "zero"}
    if not isinstance(raw, dict) or "kind" not in raw:
        raise ScenarioError(f"{where}: expected a mapping with a 'kind'")
    kind = choice(*CONTROL_KEYS)(raw["kind"], f"{where}.kind")
    body = _section({k: v for k, v in raw.items() if k != "kind"}, CONTROL_KEYS[kind], where)
    return {"kind": kind, **body}


def _params(raw, names, where):
    return _section(raw, {n: (0.0, real()) for n in names}, where)


def validate(raw) -> dict:
    """Validate a parsed scenario mapping and return its canonical form."""
    if not isinstance(raw, dict):
        raise ScenarioError("scenario: the top level must be a mapping")
    _unknown(raw, TOP, "scenario")
    if "kind" not in raw:
        raise ScenarioError("scenario: missing required key 'kind'")
    kind = choice(*KINDS)(raw["kind"], "scenario.kind")
    out = {"kind": kind, "name": str(raw.get("name", "unnamed"))}
    out["grid"] = _section(raw.get("grid"), GRID, "grid")
    n_nodes = out["grid"]["N"] + 1
    out["x0"] = real()(raw.get("x0", 1.0), "x0")
    kernels = raw.get("kernels") or {}
    if not isinstance(kernels, dict):
        raise ScenarioError("kernels: expected a mapping")
    _unknown(kernels, ("k", "l"), "kernels")
    out["kernels"] = {name: _kernel(kernels.get(name, {"kind": "zero"}), f"kernels.{name}") for name in ("k", "l")}
    for name, spec in out["kernels"].items():
        if spec["kind"] == "table":
            vals = spec["values"]
            if len(vals) != n_nodes or any(not isinstance(r, list) or len(r) != n_nodes for r in vals):
                raise ScenarioError(f"kernels.{name}.values: expected a {n_nodes}x{n_nodes} table")

    if kind == "lq":
        for key in ("dynamics", "cost"):
            if key in raw:
                raise ScenarioError(f"{key}: not used by lq scenarios (give coefficients under 'lq')")
        out["lq"] = _section(raw.get("lq"), LQ, "lq")
        for name in COEFFICIENTS:
            v = out["lq"][name]
            if isinstance(v, list) and len(v) != n_nodes:
                raise ScenarioError(f"lq.{name}: expected a scalar or {n_nodes} values, got {len(v)}")
        R = np.atleast_1d(out["lq"]["R"])
        if not R.min() > 0:
            raise ScenarioError("lq.R: must be bounded below by a positive delta")
        delta = out["lq"]["delta"]
        if delta is not None and R.min() < delta:
            raise ScenarioError(f"lq.R: minimum {R.min()} is below lq.delta = {delta}")
    else:
        if "lq" in raw:
            raise ScenarioError("lq: only lq scenarios take linear-quadratic coefficients")
        dyn = raw.get("dynamics")
        if not isinstance(dyn, dict):
            raise ScenarioError("dynamics: required mapping with 'family' and 'params'")
        _unknown(dyn, ("family", "params"), "dynamics")
        fam = choice(*FAMILIES)(dyn.get("family"), "dynamics.family")
        out["dynamics"] = {"family": fam, "params": _params(dyn.get("params"), FAMILIES[fam], "dynamics.params")}
        cost = raw.get("cost")
        if cost is None and kind == "smp-check":
            raise ScenarioError("cost: required for smp-check scenarios")
        if cost is not None:
            if not isinstance(cost, dict):
                raise ScenarioError("cost: expected a mapping")
            _unknown(cost, ("family", "params"), "cost")
            choice("quadratic")(cost.get("family", "quadratic"), "cost.family")
            params = _params(cost.get("params"), COST_PARAMS, "cost.params")
            for name in ("qx", "qy", "r", "rv", "gx"):
                if params[name] < 0:
                    raise ScenarioError(f"cost.params.{name}: must be non-negative")
            out["cost"] = {"family": "quadratic", "params": params}
    out["control"] = _control(raw.get("control"), "control")
    if out["control"]["kind"] == "open_loop" and len(out["control"]["values"]) != n_nodes:
        raise ScenarioError(f"control.values: expected {n_nodes} values")
    bounds = raw.get("bounds", [None, None])
    if not isinstance(bounds, list) or len(bounds) != 2:
        raise ScenarioError("bounds: expected [lower, upper] (null for unbounded)")
    b = [optional(real())(x, f"bounds[{j}]") for j, x in enumerate(bounds)]
    if b[0] is not None and b[1] is not None and b[0] > b[1]:
        raise ScenarioError("bounds: lower bound exceeds upper bound")
    out["bounds"] = b
    out["monte_carlo"] = _section(raw.get("monte_carlo"), MONTE_CARLO, "monte_carlo")
    out["solver"] = _section(raw.get("solver"), SOLVER, "solver")
    out["checks"] = _section(raw.get("checks"), CHECKS, "checks")
    out["convergence"] = _section(raw.get("convergence"), CONVERGENCE, "convergence")
    cands = raw.get("candidates") or []
    if not isinstance(cands, list):
        raise ScenarioError("candidates: expected a list of controls")
    out["candidates"] = [_control(c, f"candidates[{j}]") for j, c in enumerate(cands)]
    return out


class Scenario:
    """A validated scenario plus builders for the numerical objects it describes."""

    def __init__(self, data: dict):
        self.data = validate(data)

    def __getitem__(self, key):
        return self.data[key]

    def __eq__(self, other):
        return isinstance(other, Scenario) and self.canonical_json() == other.canonical_json()

    @property
    def kind(self) -> str:
        return self.data["kind"]

    def with_overrides(self, seed=None, n_paths=None) -> "Scenario":
        data = copy.deepcopy(self.data)
        if seed is not None:
            data["monte_carlo"]["seed"] = seed
        if n_paths is not None:
            data["monte_carlo"]["n_paths"] = n_paths
        return Scenario(data)

    def canonical_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True, default_flow_style=None)

    # builders

    def grid(self, N: int | None = None) -> TimeGrid:
        g = self.data["grid"]
        return TimeGrid(g["T"], g["N"] if N is None else N)

    def kernel(self, name: str, grid: TimeGrid | None = None) -> Kernel:
        spec = dict(self.data["kernels"][name])
        if spec["kind"] == "table" and grid is not None and grid != self.grid():
            raise ScenarioError(f"kernels.{name}: a tabulated kernel only exists on the scenario grid")
        return kernel_from_dict(spec, grid or self.grid())

    @property
    def bounds(self) -> tuple[float, float]:
        lo, hi = self.data["bounds"]
        return (-np.inf if lo is None else lo, np.inf if hi is None else hi)

    def coefficients(self) -> CoefficientSet:
        dyn = self.data["dynamics"]
        return coefficient_family(dyn["family"], dyn["params"])

    def cost(self) -> CostSpec | None:
        c = self.data.get("cost")
        return None if c is None else quadratic_cost(c["params"])

    def control(self, grid: TimeGrid | None = None, spec: dict | None = None) -> ControlSpec:
        return build_control(spec or self.data["control"], grid or self.grid(), self.bounds)

    def control_problem(self, grid: TimeGrid | None = None) -> ControlProblem:
        grid = grid or self.grid()
        if self.kind == "lq":
            return self.lq_coefficients(grid).control_problem()
        cost = self.cost()
        if cost is None:
            raise ScenarioError("cost: this operation needs a cost")
        return ControlProblem(self.coefficients(), cost, self.kernel("k", grid), self.kernel("l", grid),
                              grid, self.data["x0"], self.bounds)

    def lq_coefficients(self, grid: TimeGrid | None = None) -> LQCoefficients:
        if self.kind != "lq":
            raise ScenarioError("lq: not an lq scenario")
        grid = grid or self.grid()
        lq = self.data["lq"]
        vals = {}
        for name in COEFFICIENTS:
            v = lq[name]
            if isinstance(v, list):
                src = self.grid()
                v = np.interp(grid.nodes, src.nodes, np.asarray(v))
            vals[name] = v
        return LQCoefficients.build(grid, k=self.kernel("k", grid), l=self.kernel("l", grid), x0=self.data["x0"],
                                    G=lq["G"], delta=lq["delta"], **vals)


def _growth_constant(p: dict) -> float:
    # Cauchy-Schwarz: (c0 + sum c_j a_j)^2 <= (sum c^2)(1 + sum a_j^2), and |sin a| <= |a|
    drift = sum(v ** 2 for k, v in p.items() if k.startswith("b"))
    diffusion = sum(v ** 2 for k, v in p.items() if k.startswith("s"))
    return max(drift, diffusion, 1e-12)


def coefficient_family(family: str, p: dict) -> CoefficientSet:
    if family == "linear":
        def affine(prefix):
            const = p[f"{prefix}0"]
            terms = [(n, p[f"{prefix}{a}"]) for n, a in enumerate("xyuv") if p[f"{prefix}{a}"] != 0.0]

            def fn(t, *args):
                out = np.full(np.broadcast(*args).shape, const)
                for n, c in terms:  # zero coefficients are skipped, they cost a full pass each
                    out += c * args[n]
                return out
            return fn

        b, sigma = affine("b"), affine("s")

        derivs = {f"b_{a}": (lambda c: lambda t, x, y, u, v: c)(p[f"b{a}"]) for a in "xyuv"}
        derivs.update({f"sigma_{a}": (lambda c: lambda t, x, y, u, v: c)(p[f"s{a}"]) for a in "xyuv"})
        return CoefficientSet(b, sigma, L=_growth_constant(p), derivatives=derivs)
    if family == "sine_memory":
        def b(t, x, y, u, v):
            return p["bx"] * x + p["by"] * np.sin(y) + p["bu"] * u + p["bv"] * np.sin(v)

        def sigma(t, x, y, u, v):
            return p["s0"] + p["sx"] * x + p["sy"] * np.sin(y) + p["su"] * u + p["sv"] * v

        derivs = {
            "b_x": lambda t, x, y, u, v: p["bx"], "b_y": lambda t, x, y, u, v: p["by"] * np.cos(y),
            "b_u": lambda t, x, y, u, v: p["bu"], "b_v": lambda t, x, y, u, v: p["bv"] * np.cos(v),
            "sigma_x": lambda t, x, y, u, v: p["sx"], "sigma_y": lambda t, x, y, u, v: p["sy"] * np.cos(y),
            "sigma_u": lambda t, x, y, u, v: p["su"], "sigma_v": lambda t, x, y, u, v: p["sv"],
        }
        return CoefficientSet(b, sigma, L=_growth_constant(p), derivatives=derivs)
    raise ScenarioError(f"dynamics.family: unknown family {family!r}")


def quadratic_cost(p: dict) -> CostSpec:
    """``f = (qx (x - target)^2 + qy y^2 + r u^2 + rv v^2) / 2`` and ``g = gx (x - target)^2 / 2``."""
    def f(t, x, y, u, v):
        return 0.5 * (p["qx"] * (x - p["target"]) ** 2 + p["qy"] * y ** 2 + p["r"] * u ** 2 + p["rv"] * v ** 2)

    def g(x):
        return 0.5 * p["gx"] * (x - p["target"]) ** 2

    derivs = {"f_x": lambda t, x, y, u, v: p["qx"] * (x - p["target"]),
              "f_y": lambda t, x, y, u, v: p["qy"] * y,
              "f_u": lambda t, x, y, u, v: p["r"] * u,
              "f_v": lambda t, x, y, u, v: p["rv"] * v,
              "g_x": lambda x: p["gx"] * (x - p["target"])}
    return CostSpec(f, g, derivs)


def build_control(spec: dict, grid: TimeGrid, bounds=(-np.inf, np.inf)) -> ControlSpec:
    kind = spec["kind"]
    t = grid.nodes
    if kind == "zero":
        return ControlSpec.open_loop(np.zeros(grid.n_nodes), bounds)
    if kind == "constant":
        return ControlSpec.open_loop(np.full(grid.n_nodes, spec["value"]), bounds)
    if kind == "sinusoid":
        vals = spec["offset"] + spec["amplitude"] * np.sin(2 * np.pi * spec["frequency"] * t + spec["phase"])
        return ControlSpec.open_loop(vals, bounds)
    if kind == "open_loop":
        vals = np.asarray(spec["values"], dtype=float)
        if vals.shape[0] != grid.n_nodes:
            raise ScenarioError(f"control.values: expected {grid.n_nodes} values, got {vals.shape[0]}")
        return ControlSpec.open_loop(vals, bounds)
    if kind == "linear_feedback":
        off, kx, ky = spec["offset"], spec["kx"], spec["ky"]
        return ControlSpec.from_feedback(lambda t, x, y: off + kx * x + ky * y, bounds)
    raise ScenarioError(f"control.kind: unknown kind {kind!r}")


def parse_scenario(text: str, source: str = "<string>") -> Scenario:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark is not None else ""
        problem = getattr(exc, "problem", None) or str(exc)
        raise ScenarioError(f"{source}: YAML parse error{where}: {problem}") from exc
    return Scenario(raw)


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file {path}: {exc.strerror}") from exc
    return parse_scenario(text, str(path))


def shipped_scenarios() -> dict[str, Path]:
    """Scenario files bundled with the package, by stem."""
    root = resources.files("volterra_smp") / "scenarios"
    return {p.name[:-5]: Path(str(p)) for p in sorted(root.iterdir(), key=lambda p: p.name)
            if p.name.endswith(".yaml")}
