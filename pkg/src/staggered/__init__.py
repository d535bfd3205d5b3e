"""Efficient estimation and design-based inference for staggered rollouts."""

from .api import EventStudyEstimator, StaggeredEstimator, check_panel
from .estimands import (
    AdjustmentSpec,
    EstimandWeights,
    build_adjustment,
    build_estimand,
    build_event_study,
    custom_estimand,
)
from .estimator import Design, beta_star, cohort_stats, point_estimates, variance_components
from .exceptions import (
    NumericalError,
    SingularCovarianceError,
    StaggeredError,
    UnidentifiedError,
    ValidationError,
)
from .inference import Plan, balance_test, event_study, frt, infer
from .montecarlo import MCConfig, PopulationSpec, PotentialOutcomes, enumerate_frt, enumerate_moments, run_mc
from .panel import NEVER, PanelData, from_wide, load_panel, validate

__version__ = "0.1.0"

__all__ = [
    "AdjustmentSpec", "Design", "EstimandWeights", "EventStudyEstimator", "MCConfig", "NEVER",
    "NumericalError", "PanelData", "Plan", "PopulationSpec", "PotentialOutcomes", "SingularCovarianceError",
    "StaggeredError", "StaggeredEstimator", "UnidentifiedError", "ValidationError", "balance_test",
    "beta_star", "build_adjustment", "build_estimand", "build_event_study", "check_panel", "cohort_stats",
    "custom_estimand", "enumerate_frt", "enumerate_moments", "event_study", "from_wide", "frt", "infer",
    "load_panel", "point_estimates", "run_mc", "validate", "variance_components",
]
