"""Continual text classification with disentangled generic/specific representations,
snapshot regularization and K-means selected replay."""

from .corpus import Example, TaskDescriptor, TaskSequence, build_task_sequence, make_nsp_pair
from .evaluation import AccuracyMatrix, average_accuracy, forgetting
from .model import ModelConfig, build_model
from .objectives import LossTerms, LossWeights, total_loss
from .synthetic import SyntheticConfig
from .trainer import RunResult, TrainConfig, run_sequence

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix",
    "Example",
    "LossTerms",
    "LossWeights",
    "ModelConfig",
    "RunResult",
    "SyntheticConfig",
    "TaskDescriptor",
    "TaskSequence",
    "TrainConfig",
    "average_accuracy",
    "build_model",
    "build_task_sequence",
    "forgetting",
    "make_nsp_pair",
    "run_sequence",
    "total_loss",
]
