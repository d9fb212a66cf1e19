"""Exception types shared across the package.

The CLI maps these onto exit codes: validation problems exit with 2,
non-convergence and divergence with 3, anything else with 4.
"""
from __future__ import annotations


class InvalidArgument(ValueError):
    """An argument violates a documented precondition."""


class SingularKernelError(InvalidArgument):
    """A kernel was evaluated at a point where it is not defined."""


class SimulationDiverged(RuntimeError):
    """A forward simulation produced a non-finite value."""

    def __init__(self, path: int, node: int):
        super().__init__(f"simulation diverged: first non-finite value at path {path}, node {node}")
        self.path = path
        self.node = node


class NonConvergence(RuntimeError):
    """An iterative solver ran out of iterations.

    ``history`` carries whatever the solver was tracking (Picard deltas,
    cost values, control deltas) so the caller can judge what happened.
    """

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class ScenarioError(InvalidArgument):
    """A scenario file failed to parse or validate."""
