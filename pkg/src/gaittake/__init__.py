"""Gait recognition with global/local 3-D convolutions, clip attention and pose fusion."""

from .config import ConfigError, ModelConfig, RunConfig, desk_config, micro_config
from .estimator import GaitTAKE, make_estimator
from .evaluation import EmbeddingStore, EvalReport, embed_set, pairwise_distance, rank1_matrix, render_report
from .model import ModelParams, model_forward
from .sequences import GaitSample, KeypointSequence, SilhouetteSequence
from .tensor import Tensor, backward
from .training import TrainState, checkpoint_load, checkpoint_save, sample_batch, train, train_step, triplet_loss

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "EmbeddingStore",
    "EvalReport",
    "GaitSample",
    "GaitTAKE",
    "KeypointSequence",
    "ModelConfig",
    "ModelParams",
    "RunConfig",
    "SilhouetteSequence",
    "Tensor",
    "TrainState",
    "backward",
    "checkpoint_load",
    "checkpoint_save",
    "desk_config",
    "embed_set",
    "make_estimator",
    "micro_config",
    "model_forward",
    "pairwise_distance",
    "rank1_matrix",
    "render_report",
    "sample_batch",
    "train",
    "train_step",
    "triplet_loss",
]
