"""Trajectory simulators: deterministic flows, controlled diffusions, switched PDMPs."""

from borderlab.dynamics.flow import FlowResult, VectorField, example_field, integrate_flow
from borderlab.dynamics.pdmp import (
    BoundaryCheck,
    PdmpEnsemble,
    PdmpTriplet,
    check_boundary_condition,
    simulate_pdmp,
    simulate_pdmp_ensemble,
    stationary_distribution,
)
from borderlab.dynamics.sde import (
    ControlledCoefficients,
    ControlPolicy,
    estimate_sup_moment,
    from_field,
    ornstein_uhlenbeck,
    shaking_law,
    simulate_paths,
    steered,
)

__all__ = [
    "BoundaryCheck",
    "ControlPolicy",
    "ControlledCoefficients",
    "FlowResult",
    "PdmpEnsemble",
    "PdmpTriplet",
    "VectorField",
    "check_boundary_condition",
    "estimate_sup_moment",
    "example_field",
    "from_field",
    "integrate_flow",
    "ornstein_uhlenbeck",
    "shaking_law",
    "simulate_paths",
    "simulate_pdmp",
    "simulate_pdmp_ensemble",
    "stationary_distribution",
    "steered",
]
