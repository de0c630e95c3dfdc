"""Desk-scale laboratory for reducing question-answer shortcut learning in
multimodal classifiers, on a synthetic benchmark whose answer priors change
between train and test."""

from .tensor import Tensor, backward, finite_difference_check, no_grad, reset_graph
from .datagen import DatasetSpec, generate
from .model import ModelSizes, VqaModel
from .strategy import QuestionOnlyBranch, StrategyConfig, compute_losses
from .trainer import TrainConfig, train

__all__ = [
    "Tensor",
    "backward",
    "finite_difference_check",
    "no_grad",
    "reset_graph",
    "DatasetSpec",
    "generate",
    "ModelSizes",
    "VqaModel",
    "QuestionOnlyBranch",
    "StrategyConfig",
    "compute_losses",
    "TrainConfig",
    "train",
]

__version__ = "0.1.0"
