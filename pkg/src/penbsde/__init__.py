"""Penalized Monte Carlo for reflected diffusions and Neumann-type backward SDEs."""

__version__ = "0.1.0"

from .geometry import (  # noqa: E402
    Ball,
    BoundaryData,
    Box,
    HalfspaceIntersection,
    distance,
    inward_normal,
    penalty_delta,
    project,
    sample_points,
)
from .problems import ProblemInstance, builtin, manufacture, validate_instance  # noqa: E402
from .forward import (  # noqa: E402
    TimeGrid,
    batch_simulate,
    simulate_coupled,
    simulate_penalized,
    simulate_reflected,
    step_penalized,
    step_reflected,
)
from .bsde import (  # noqa: E402
    PiecewiseConstantBasis,
    PolynomialBasis,
    SolverConfig,
    comparison_check,
    estimate_u_point,
    regress,
    solve_linear_mc,
    solve_lsmc,
)
from .diagnostics import conditional_variation, coupling_report, upcrossings  # noqa: E402
