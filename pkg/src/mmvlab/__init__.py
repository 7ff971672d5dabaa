"""Numerical laboratory for constrained monotone mean-variance and
mean-variance investment-reinsurance in the Cramér–Lundberg model."""

from .bsde import (BsdeSolution, SolverError, driver_P, driver_P1, driver_P2, driver_Y, g2_star,
                   minimize_G1, p_to_y, solve_deterministic, y_from_p2, y_to_p)
from .cone import ConeConstraint, ProjectionResult, project_cone, rho_mmv
from .config import ConfigError, ExperimentConfig
from .lsmc import LsmcSettings, QualityError, solve_lsmc
from .model import (ClaimDistribution, DeterministicCoefficients, GirsanovKernel, InsuranceParams,
                    MarketModel, OUFactorModel, PiecewiseConstant, PositivityError,
                    ValidationError, claim_moments, discount_h, wealth_shift)
from .runner import run_experiment
from .simulation import AdmissibilityError, PathBundle, doleans_lambda, simulate_paths
from .strategy import (FeedbackStrategy, Frontier, FrontierPoint, j_value, mmv_feedback,
                       mmv_kernels, mmv_value, mv_feedback, mv_frontier)
from .verification import (EstimateReport, VerificationError, check_identity, check_saddle,
                           estimate_mmv_objective, estimate_mv_objective)

__all__ = [
    "AdmissibilityError", "BsdeSolution", "check_identity", "check_saddle", "claim_moments",
    "ClaimDistribution", "ConeConstraint", "ConfigError", "DeterministicCoefficients",
    "discount_h", "doleans_lambda", "driver_P", "driver_P1", "driver_P2", "driver_Y",
    "estimate_mmv_objective", "estimate_mv_objective", "EstimateReport", "ExperimentConfig",
    "FeedbackStrategy", "Frontier", "FrontierPoint", "g2_star", "GirsanovKernel",
    "InsuranceParams", "j_value", "LsmcSettings", "MarketModel", "minimize_G1", "mmv_feedback",
    "mmv_kernels", "mmv_value", "mv_feedback", "mv_frontier", "OUFactorModel", "p_to_y",
    "PathBundle", "PiecewiseConstant", "PositivityError", "project_cone", "ProjectionResult",
    "QualityError", "rho_mmv", "run_experiment", "simulate_paths", "solve_deterministic",
    "solve_lsmc", "SolverError", "ValidationError", "VerificationError", "wealth_shift",
    "y_from_p2", "y_to_p",
]

__version__ = "0.1.0"
