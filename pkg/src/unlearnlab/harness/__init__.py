"""Experiment orchestration, persistence and the command-line interface."""

from .config import ConfigValidationError, ExperimentConfig, dump_config, load_config
from .experiment import PreconditionError, prepare, run_experiment, run_sweep

__all__ = ["ConfigValidationError", "ExperimentConfig", "PreconditionError", "dump_config",
           "load_config", "prepare", "run_experiment", "run_sweep"]
