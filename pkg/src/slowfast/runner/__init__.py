from .config import BenchConfig, ConfigError, ExperimentConfig, InterventionConfig, PretrainConfig, load_config
from .experiment import (RunSummary, aggregate, build_split, cached_pretrained, output_root, pretrain,
                         run_experiment, run_grid, run_probe_sweep)
from .pipeline import METHODS, FinetuneResult, TrainSettings, finetune, policy_for_method

__all__ = [
    "BenchConfig", "ConfigError", "ExperimentConfig", "InterventionConfig", "PretrainConfig", "load_config",
    "RunSummary", "aggregate", "build_split", "cached_pretrained", "output_root", "pretrain", "run_experiment",
    "run_grid", "run_probe_sweep", "METHODS", "FinetuneResult", "TrainSettings", "finetune", "policy_for_method",
]
