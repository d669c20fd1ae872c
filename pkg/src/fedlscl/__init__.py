"""Federated continual fine-tuning of a frozen transformer through small-model adapter generators."""
from .config import Ablation, ConfigError, DataConfig, FederationConfig, HyperParams, load_config, reference_config
from .federation import build_federation, run_experiment, run_seed_sweep

__all__ = [
    "Ablation",
    "ConfigError",
    "DataConfig",
    "FederationConfig",
    "HyperParams",
    "build_federation",
    "load_config",
    "reference_config",
    "run_experiment",
    "run_seed_sweep",
]
