"""Desk-scale camera-controlled video diffusion.

A from-scratch stack: a numpy-backed autodiff tensor engine, pinhole camera
geometry with per-pixel ray-line embedding volumes, a read/write
latent-bottleneck video transformer with a zero-initialized
camera-conditioning branch, a denoising-diffusion trainer/sampler, a
procedural raycast dataset, and a CLI harness that reproduces the
camera-controllability ordering across conditioning variants.
"""

from .camera import (
    CameraPose,
    CameraTrajectory,
    CameraValidationError,
    NotNormalizedError,
    camera_features,
    normalize_trajectory,
    pixel_ray,
    plucker_volume,
)
from .diffusion import DiffusionConfig, denoising_loss, sample_sigma, sample_video
from .model import ModelConfig, VideoModel
from .optim import LAMB, AdamW, warmup_linear_lr
from .tensor import Tape, Tensor
from .training import RunConfig, train_run

__version__ = "0.1.0"

__all__ = [
    "CameraPose",
    "CameraTrajectory",
    "CameraValidationError",
    "NotNormalizedError",
    "camera_features",
    "normalize_trajectory",
    "pixel_ray",
    "plucker_volume",
    "DiffusionConfig",
    "denoising_loss",
    "sample_sigma",
    "sample_video",
    "ModelConfig",
    "VideoModel",
    "LAMB",
    "AdamW",
    "warmup_linear_lr",
    "Tape",
    "Tensor",
    "RunConfig",
    "train_run",
    "__version__",
]
