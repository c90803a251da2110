"""Experiment configs, observation synthesis, runs and the ``gppi`` CLI."""

from .config import ExperimentConfig, config_from_dict, load_config, parse_config
from .observations import make_rng, synthesize_observations
from .presets import PRESETS, preset
from .runner import build_experiment, compare_methods, run_experiment, write_outputs

__all__ = [
    "ExperimentConfig", "config_from_dict", "load_config", "parse_config", "make_rng",
    "synthesize_observations", "PRESETS", "preset", "build_experiment", "compare_methods",
    "run_experiment", "write_outputs",
]
