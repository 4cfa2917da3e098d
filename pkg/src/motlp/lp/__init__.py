from .model import (
    LPModel,
    TransportPlan,
    build_relaxed_mot_lp,
    build_transport_lp,
    evaluate_cost,
    product_indices,
    product_size,
)
from .solve import LPSolution, SolverOptions, certificate, duality_gap, extract_plan, solve

__all__ = [
    "LPModel",
    "LPSolution",
    "SolverOptions",
    "TransportPlan",
    "build_relaxed_mot_lp",
    "build_transport_lp",
    "certificate",
    "duality_gap",
    "evaluate_cost",
    "extract_plan",
    "product_indices",
    "product_size",
    "solve",
]
