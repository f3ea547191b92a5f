"""Preconditioned gradient descent realized as linear attention, with
trainable LayerNorm-gain preconditioners and exact numerical oracles."""

from .estimator import PreconditionedAttentionClassifier, PreconditionedAttentionRegressor
from .model import Model, ModelConfig, PreconditionerSet, build_model, forward, predict
from .objectives import ObjectiveBreakdown, SharpnessConfig, total_objective
from .tasks import TaskInstance, TaskSpec, build_prompt, sample_suite, sample_task
from .training import TrainConfig, TrainReport, gradcheck, train

__version__ = "0.1.0"

__all__ = [
    "Model",
    "ModelConfig",
    "ObjectiveBreakdown",
    "PreconditionedAttentionClassifier",
    "PreconditionedAttentionRegressor",
    "PreconditionerSet",
    "SharpnessConfig",
    "TaskInstance",
    "TaskSpec",
    "TrainConfig",
    "TrainReport",
    "build_model",
    "build_prompt",
    "forward",
    "gradcheck",
    "predict",
    "sample_suite",
    "sample_task",
    "total_objective",
    "train",
    "__version__",
]
