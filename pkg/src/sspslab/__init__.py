"""Desk-scale self-supervised speaker representation learning with
bootstrapped positive sampling, end to end on synthetic data."""

from .config import ExperimentConfig, build_dataset, load_config
from .core import ConfigError, TrainingDivergedError, ZeroNormError
from .ssps import SamplerConfig, Strategy
from .synthdata import GenConfig, TrialPair, UtteranceRecord, generate_dataset, make_trials
from .trainer import EpochReport, ModelConfig, TrainConfig, evaluate, run_experiment

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "EpochReport",
    "ExperimentConfig",
    "GenConfig",
    "ModelConfig",
    "SamplerConfig",
    "Strategy",
    "TrainConfig",
    "TrainingDivergedError",
    "TrialPair",
    "UtteranceRecord",
    "ZeroNormError",
    "build_dataset",
    "evaluate",
    "generate_dataset",
    "load_config",
    "make_trials",
    "run_experiment",
    "__version__",
]
