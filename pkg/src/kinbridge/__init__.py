"""Numerical toolkit for entropic bridges of underdamped Langevin dynamics.

The package solves static Schrodinger problems over the kinetic Langevin
reference process on small tensor grids (1-d position, 1-d velocity), builds
the associated entropic interpolation flows, and verifies long-time
contraction and turnpike behaviour against a certified Lyapunov rate.

Layout:

    model          potentials, invariant measure, grids, entropy/Fisher
    twisted        quadratic Lyapunov norms and the contraction rate kappa
    kernel         transition kernels of the Langevin semigroup on the grid
    solver         log-domain Sinkhorn for the static bridge problems
    interpolation  bridge flows, correctors, cost identities, Gaussian W2
    experiments    sweep drivers with rate fits (CSV/JSON/PNG emission)
    cli            command line front end
"""

from . import exceptions
from .model import (
    Potential,
    PhaseGrid,
    InvariantMeasure,
    PhaseDensity,
    SpatialDensity,
    build_grid,
    invariant_measure,
    relative_entropy,
    fisher_information,
    marginalize_velocity,
)
from .twisted import TwistedNorms, build_twisted_norms, contraction_rate
from .kernel import TransitionKernel, ReducedKernel, gaussian_kernel, mc_kernel, reduce_kernel
from .solver import SchrodingerPotentials, SolveReport, entropic_cost, sinkhorn, static_coupling
from .interpolation import BridgeFlow, compute_flow, flow_diagnostics, gaussian_wasserstein

__version__ = "0.1.0"

__all__ = [
    "exceptions",
    "Potential",
    "PhaseGrid",
    "InvariantMeasure",
    "PhaseDensity",
    "SpatialDensity",
    "build_grid",
    "invariant_measure",
    "relative_entropy",
    "fisher_information",
    "marginalize_velocity",
    "TwistedNorms",
    "build_twisted_norms",
    "contraction_rate",
    "TransitionKernel",
    "ReducedKernel",
    "gaussian_kernel",
    "mc_kernel",
    "reduce_kernel",
    "SchrodingerPotentials",
    "SolveReport",
    "sinkhorn",
    "BridgeFlow",
    "compute_flow",
    "flow_diagnostics",
    "gaussian_wasserstein",
]
