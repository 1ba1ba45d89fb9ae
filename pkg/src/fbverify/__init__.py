"""Verification of optimal controls for FBSDE-driven stochastic control problems.

Solve the HJB equation on a grid, synthesize a feedback policy, estimate
costs with forward-backward Monte Carlo and check candidate pairs against
the value field through one-sided jets and the Hamiltonian gap.
"""
__version__ = "0.1.0"

from .fbsde import Estimate, PathBundle, estimate_cost, simulate_forward, solve_bsde
from .hjb import (
    CFLViolation,
    FeedbackPolicy,
    Grid,
    SolverBreakdown,
    ValueField,
    hamiltonian,
    hamiltonian_min,
    query,
    solve_hjb,
    synthesize_policy,
)
from .model import ControlProblem, ControlSet, EvaluatorError, builtin, lipschitz_probe
from .subdiff import (
    JetCandidate,
    NeighborhoodSchedule,
    growth_check,
    regularity_check,
    semiconcavity_constant,
    test_subjet,
    test_superjet,
)
from .verify import (
    Verdict,
    VerificationReport,
    pointwise_hjb_residual,
    superjet_inequality_check,
    verify_feedback,
    verify_pair,
)

__all__ = [
    "CFLViolation", "ControlProblem", "ControlSet", "Estimate", "EvaluatorError", "FeedbackPolicy",
    "Grid", "JetCandidate", "NeighborhoodSchedule", "PathBundle", "SolverBreakdown", "ValueField",
    "Verdict", "VerificationReport", "builtin", "estimate_cost", "growth_check", "hamiltonian",
    "hamiltonian_min", "lipschitz_probe", "pointwise_hjb_residual", "query", "regularity_check",
    "semiconcavity_constant", "simulate_forward", "solve_bsde", "solve_hjb", "superjet_inequality_check",
    "synthesize_policy", "test_subjet", "test_superjet", "verify_feedback", "verify_pair",
]
