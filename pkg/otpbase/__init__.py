from .oalloc import AllocationPlan, allocate, fixed_T_plan, validate_plan
from .odesign import CovariateDesign, farthest_point_design, grid_design
from .oeval import empirical_rate, mse_decomposition_estimate, relative_optimality_gap
from .oharness import (
    ExperimentConfig,
    ExperimentReport,
    allocation_table,
    emit_csv,
    load_model,
    pilot_select_T,
    run_otp_experiment,
    save_model,
    sweep_budget,
)
from .oproblem import Newsvendor, NewsvendorSpec, SimulationProblem
from .osgd import PrSgdConfig, batch_solve, solve
from .osmooth import FittedSolutionMap, SmootherSpec, fit, predict, weights

__all__ = [
    "AllocationPlan",
    "CovariateDesign",
    "ExperimentConfig",
    "ExperimentReport",
    "FittedSolutionMap",
    "Newsvendor",
    "NewsvendorSpec",
    "PrSgdConfig",
    "SimulationProblem",
    "SmootherSpec",
    "allocate",
    "allocation_table",
    "batch_solve",
    "emit_csv",
    "empirical_rate",
    "farthest_point_design",
    "fit",
    "fixed_T_plan",
    "grid_design",
    "load_model",
    "mse_decomposition_estimate",
    "pilot_select_T",
    "predict",
    "relative_optimality_gap",
    "run_otp_experiment",
    "save_model",
    "solve",
    "sweep_budget",
    "validate_plan",
    "weights",
]
