"""Experiment configuration, running, metrics and artifact output."""

from .artifacts import Emitter, emit_artifacts, verify_manifest
from .config import ExperimentConfig, dump_config, load_config, parse_config, to_dict
from .experiments import run_experiment
from .metrics import moment_metrics
from .models import build_testbed

__all__ = [
    "Emitter",
    "ExperimentConfig",
    "build_testbed",
    "dump_config",
    "emit_artifacts",
    "load_config",
    "moment_metrics",
    "parse_config",
    "run_experiment",
    "to_dict",
    "verify_manifest",
]
