"""Training, checkpointing and inference orchestration."""

from mivid.engine.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from mivid.engine.config import DiffusionConfig, TrainingConfig, build_config, dump_config, load_config
from mivid.engine.infer import interpolate
from mivid.engine.optim import AdamState, adam_step, lr_at
from mivid.engine.train import train

__all__ = [
    "AdamState",
    "Checkpoint",
    "DiffusionConfig",
    "TrainingConfig",
    "adam_step",
    "build_config",
    "dump_config",
    "interpolate",
    "load_checkpoint",
    "load_config",
    "lr_at",
    "save_checkpoint",
    "train",
]
