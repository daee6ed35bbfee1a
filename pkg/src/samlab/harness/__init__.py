"""Experiment harness: configs, runners, deterministic artifacts, and the
closed-form verification suite."""
from .config import ConfigError, ExperimentConfig, load_config
from .experiments import (DEFAULTS, RUNNERS, default_config, run_experiment)
from .verify import CheckResult, run_checks, verify

__all__ = [
    "CheckResult",
    "ConfigError",
    "DEFAULTS",
    "ExperimentConfig",
    "RUNNERS",
    "default_config",
    "load_config",
    "run_checks",
    "run_experiment",
    "verify",
]
