"""Experiment orchestration: configuration, pipeline, plot data, acceptance suite and CLI."""

from .acceptance import CRITERIA, Criterion, Suite, verify_suite
from .config import ExperimentConfig, RegionSpec, Tolerances, bundled_config, load_config, parse_config
from .pipeline import Report, run_experiment
from .plots import emit_plot_data

__all__ = [
    "CRITERIA", "Criterion", "ExperimentConfig", "RegionSpec", "Report", "Suite", "Tolerances",
    "bundled_config", "emit_plot_data", "load_config", "parse_config", "run_experiment", "verify_suite",
]
