"""Conditional latent diffusion: schedule, denoisers, training, sampling."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import (
    MlpDenoiser,
    SpatialDenoiser,
    architecture_hash,
    build_denoiser,
    despatialize,
    spatialize,
)
from .sample import ddim_timesteps, sample, tta_sample
from .schedule import DiffusionSchedule, forward_diffuse, forward_step, linear_schedule
from .train import (
    LatentDecoder,
    TrainConfig,
    TrainResult,
    TrainingDivergedError,
    chamfer_loss,
    dual_loss,
    frozen_correspondences,
    train,
    train_step,
)
from .whitening import LatentWhitening, fit_whitening

__all__ = [
    "CheckpointError",
    "DiffusionSchedule",
    "LatentDecoder",
    "LatentWhitening",
    "MlpDenoiser",
    "SpatialDenoiser",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "architecture_hash",
    "build_denoiser",
    "chamfer_loss",
    "ddim_timesteps",
    "despatialize",
    "dual_loss",
    "fit_whitening",
    "forward_diffuse",
    "forward_step",
    "frozen_correspondences",
    "linear_schedule",
    "load_checkpoint",
    "sample",
    "save_checkpoint",
    "spatialize",
    "tta_sample",
    "train",
    "train_step",
]
