"""Synthetic linear-Gaussian speaker benchmark and trainer."""

from .data import Dataset, Split, SynthConfig, generate
from .diagnostics import DiagnosticsReport, spearman, uncertainty_diagnostics
from .model import Architecture, XiPlusModel
from .train import (Checkpoint, TrainConfig, centroids_from_model, embed_split, finetune_svl,
                    learning_rate, optimizer_step, pretrain)

__all__ = [
    "Architecture", "Checkpoint", "Dataset", "DiagnosticsReport", "Split", "SynthConfig",
    "TrainConfig", "XiPlusModel", "centroids_from_model", "embed_split", "finetune_svl",
    "generate", "learning_rate", "optimizer_step", "pretrain", "spearman",
    "uncertainty_diagnostics",
]
