"""Benchmark driver, metrics, configuration and command-line interface."""

from .config import ExperimentConfig, config_from_dict, load_config
from .experiment import (
    LocalizationResult,
    Report,
    Variant,
    run_ablation,
    run_experiment,
)
from .metrics import (
    LOOSE,
    STRICT,
    THRESHOLDS,
    TIGHT,
    recall_at,
    rotation_error,
    translation_error,
)

__all__ = [
    "ExperimentConfig", "config_from_dict", "load_config", "LocalizationResult", "Report",
    "Variant", "run_ablation", "run_experiment", "LOOSE", "STRICT", "THRESHOLDS", "TIGHT",
    "recall_at", "rotation_error", "translation_error",
]
