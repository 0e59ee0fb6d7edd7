"""Optimisation, checkpointing and the three training stages."""
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .optim import Adam, EarlyStopping, ReduceLROnPlateau, clip_grad_norm, global_norm
from .stages import (
    DependencyError, TrainResult, evaluate, fit, model_from_checkpoint, require_stage,
    train_stage1, train_stage2, train_stage3,
)

__all__ = [
    "Checkpoint", "CheckpointError", "load_checkpoint", "save_checkpoint", "Adam",
    "EarlyStopping", "ReduceLROnPlateau", "clip_grad_norm", "global_norm", "DependencyError",
    "TrainResult", "evaluate", "fit", "model_from_checkpoint", "require_stage",
    "train_stage1", "train_stage2", "train_stage3",
]
