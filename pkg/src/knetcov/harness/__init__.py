"""Experiment orchestration and command line interface."""

from .config import ExperimentConfig, ModelSpec, default_config, load_config
from .covtest import CovtestReport, covtest
from .scenario import ReportBundle, ScenarioError, run_scenario, single_trajectory_report

__all__ = [
    "CovtestReport",
    "ExperimentConfig",
    "ModelSpec",
    "ReportBundle",
    "ScenarioError",
    "covtest",
    "default_config",
    "load_config",
    "run_scenario",
    "single_trajectory_report",
]
