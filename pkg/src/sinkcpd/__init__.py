"""Supervised online change-point detection with learned Sinkhorn metrics."""

from .errors import InputError, NumericalError, TrainingError
from .ot import (
    BatchSolveResult,
    DualPotentials,
    GroundMetric,
    PointCloud,
    SinkhornResult,
    SolverConfig,
    TransportPlan,
    cost_matrix,
    divergence_gradient,
    sinkhorn_distance,
    sinkhorn_divergence,
    sinkhorn_divergence_batch,
    sinkhorn_solve,
    sinkhorn_solve_batch,
    transport_gradient,
)

__version__ = "0.1.0"
