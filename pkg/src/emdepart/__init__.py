"""Multi-view semantic embeddings with partial alignment for document-based zero-shot learning."""

from .config import (AlignmentConfig, Config, ConfigError, DataConfig, EvalConfig, ModelConfig,
                     TrainConfig, preset)
from .data import Dataset, SynthConfig, gen_synthetic, load_dataset, prototype_oracle
from .inference import EvalReport, evaluate, harmonic_mean, per_class_top1
from .model import EmDepart, gradient_suite
from .trainer import grid_search, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AlignmentConfig", "Config", "ConfigError", "DataConfig", "EvalConfig", "ModelConfig",
    "TrainConfig", "preset", "Dataset", "SynthConfig", "gen_synthetic", "load_dataset",
    "prototype_oracle", "EvalReport", "evaluate", "harmonic_mean", "per_class_top1", "EmDepart",
    "gradient_suite", "grid_search", "load_checkpoint", "save_checkpoint", "train",
]
