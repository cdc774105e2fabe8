"""Deformable kernel networks for guided depth map upsampling."""

from dkn.autograd import Parameter, Tensor, backward, no_grad
from dkn.filtering import (
    GridSpec,
    bicubic_resize,
    bilinear_sample,
    deformable_weighted_average,
    restrict_offsets,
)
from dkn.kernels import BACKEND
from dkn.model import DknModel, FdknModel, ModelConfig, build_model

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DknModel",
    "FdknModel",
    "GridSpec",
    "ModelConfig",
    "Parameter",
    "Tensor",
    "backward",
    "bicubic_resize",
    "bilinear_sample",
    "build_model",
    "deformable_weighted_average",
    "no_grad",
    "restrict_offsets",
]
