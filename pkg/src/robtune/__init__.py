"""Robust, learning-based tuning of LTI controllers for a lane-change vehicle model."""

from .controller import Controller
from .gp import GpHyperParams, GpModel, LearnedDynamics, ResidualDataset
from .lti import FrequencyGrid, GeneralizedPlant, StateSpace, hinf_norm, lft_lower
from .rollout import RolloutConfig, performance_gradient, simulate_rollout
from .scenario import TABLE_II, ReferenceTrajectory, Scenario, make_reference
from .stability import StabilityReport, certify, stability_penalty_gradients
from .trainer import TrainerConfig, TrainingLog, adapt_controller, tune_controller
from .uncertainty import UncertaintyWeight, fit_cover, relative_error_samples
from .vehicle import BicycleModel, UncertaintyRanges, VehicleParams, linearize

__version__ = "0.1.0"

__all__ = [
    "Controller", "GpHyperParams", "GpModel", "LearnedDynamics", "ResidualDataset",
    "FrequencyGrid", "GeneralizedPlant", "StateSpace", "hinf_norm", "lft_lower",
    "RolloutConfig", "performance_gradient", "simulate_rollout", "TABLE_II",
    "ReferenceTrajectory", "Scenario", "make_reference", "StabilityReport", "certify",
    "stability_penalty_gradients", "TrainerConfig", "TrainingLog", "adapt_controller",
    "tune_controller", "UncertaintyWeight", "fit_cover", "relative_error_samples",
    "BicycleModel", "UncertaintyRanges", "VehicleParams", "linearize",
]
