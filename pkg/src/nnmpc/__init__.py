"""Neural-network model predictive control of a stirred tank reactor."""

from .config import ExperimentConfig
from .mpc import ControlSolution, Controller, MpcConfig, mpc_step, solve
from .narx import LinearArxModel, NarxModel, RegressorSpec
from .plant import PlantParams, PlantState, derivatives, steady_state, step
from .training import Dataset, TrainConfig, ValidationReport, train_lm, validate

__version__ = "0.1.0"

__all__ = [
    "ControlSolution",
    "Controller",
    "Dataset",
    "ExperimentConfig",
    "LinearArxModel",
    "MpcConfig",
    "NarxModel",
    "PlantParams",
    "PlantState",
    "RegressorSpec",
    "TrainConfig",
    "ValidationReport",
    "derivatives",
    "mpc_step",
    "solve",
    "steady_state",
    "step",
    "train_lm",
    "validate",
]
