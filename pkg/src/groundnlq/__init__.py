"""Temporal grounding of natural language queries in long egocentric videos."""

from .config import (
    AssignmentConfig,
    ConfigError,
    DecodeConfig,
    JitterConfig,
    ModelConfig,
    RunConfig,
    SyntheticConfig,
    TrainConfig,
)
from .data import DataError, GroundingDataset, GroundingSample, Moment, synthetic_dataset
from .decode_eval import Candidate, ensemble_predictions, evaluate, recall_at_k, soft_nms, temporal_iou
from .model import GroundNLQ
from .training import Checkpoint, grad_check, predict, run_stage

__all__ = [
    "AssignmentConfig", "Candidate", "Checkpoint", "ConfigError", "DataError", "DecodeConfig",
    "GroundNLQ", "GroundingDataset", "GroundingSample", "JitterConfig", "ModelConfig", "Moment",
    "RunConfig", "SyntheticConfig", "TrainConfig", "ensemble_predictions", "evaluate", "grad_check",
    "predict", "recall_at_k", "run_stage", "soft_nms", "synthetic_dataset", "temporal_iou",
]
