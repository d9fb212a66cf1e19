"""Monte-Carlo toolkit for controlled stochastic Volterra systems.

State and control both carry kernel memory. The package simulates the
state, solves the anticipated adjoint equation by regression Monte Carlo,
checks first-order optimality, and solves linear-quadratic instances.
"""
from .errors import InvalidArgument, NonConvergence, ScenarioError, SimulationDiverged, SingularKernelError
from .grid import (ConstantKernel, ExponentialKernel, FractionalAverageKernel, Kernel, TableKernel,
                   TimeGrid, kernel_eval, kernel_row_l1, make_uniform_grid, memory_adjoint,
                   volterra_quadrature)

__version__ = "0.1.0"

__all__ = [
    "InvalidArgument", "NonConvergence", "ScenarioError", "SimulationDiverged", "SingularKernelError",
    "ConstantKernel", "ExponentialKernel", "FractionalAverageKernel", "Kernel", "TableKernel",
    "TimeGrid", "kernel_eval", "kernel_row_l1", "make_uniform_grid", "memory_adjoint",
    "volterra_quadrature", "__version__",
]
