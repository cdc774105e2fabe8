"""Full-image upsampling with trained DKN / FDKN models."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from dkn.autograd import Tensor, no_grad, pixel_shuffle, pixel_unshuffle  # noqa: F401
from dkn.errors import ConfigurationError, DimensionError
from dkn.filtering import bicubic_resize, deformable_weighted_average
from dkn.model import RECEPTIVE_FIELD, RESAMPLE_STRIDE, DknModel, FdknModel
from dkn.parallel import thread_limits

PAD = RECEPTIVE_FIELD // 2
S = RESAMPLE_STRIDE


def _array(x):
    if x is None:
        return None
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def shift_and_stitch(model, guidance, target_up):
    """Dense kernel and offset fields from 16 strided DKN passes.

    Pass ``(dy, dx)`` produces the fields of every pixel with
    ``(y % 4, x % 4) == (dy, dx)``. Images are replicate-padded by 25 pixels
    so each pixel sees a full 51x51 receptive field.
    """
    if not isinstance(model, DknModel):
        raise ConfigurationError("shift_and_stitch needs a DKN model")
    target_up = _array(target_up)
    guidance = _array(guidance)
    n, _, h, w = target_up.shape
    if h < S or w < S:
        raise DimensionError(f"image {h}x{w} smaller than the {S}x{S} shift lattice")
    pad = ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD))
    tp = np.pad(target_up, pad, mode="edge")
    gp = np.pad(guidance, pad, mode="edge") if guidance is not None else None
    taps = model.config.grid.taps
    kernels = np.zeros((n, taps, h, w), dtype=model.dtype)
    offsets = np.zeros((n, 2 * taps, h, w), dtype=model.dtype)
    for dy in range(S):
        ny = -(-(h - dy) // S)
        for dx in range(S):
            nx = -(-(w - dx) // S)
            win = (slice(None), slice(None),
                   slice(dy, dy + RECEPTIVE_FIELD + S * (ny - 1)),
                   slice(dx, dx + RECEPTIVE_FIELD + S * (nx - 1)))
            k, o = model.fields(gp[win] if gp is not None else None, tp[win])
            kernels[:, :, dy::S, dx::S] = k.data
            offsets[:, :, dy::S, dx::S] = o.data
    return kernels, offsets


def fdkn_fields(model, guidance, target_up):
    """FDKN fields for any size: replicate-pad to a multiple of 4, crop after."""
    if not isinstance(model, FdknModel):
        raise ConfigurationError("fdkn_fields needs an FDKN model")
    from dkn.model import forward_full_fdkn

    target_up = _array(target_up)
    guidance = _array(guidance)
    h, w = target_up.shape[2:]
    ph, pw = -h % S, -w % S
    if ph or pw:
        pad = ((0, 0), (0, 0), (0, ph), (0, pw))
        target_up = np.pad(target_up, pad, mode="edge")
        guidance = np.pad(guidance, pad, mode="edge") if guidance is not None else None
    k, o = forward_full_fdkn(model, guidance, target_up)
    return k.data[:, :, :h, :w], o.data[:, :, :h, :w]


@dataclass
class UpsampleRequest:
    lr_depth: np.ndarray  # (1, 1, h, w)
    model: object
    hr_guidance: Optional[np.ndarray] = None  # (1, C, r*h, r*w)
    scale: Optional[int] = None

    def __post_init__(self):
        self.lr_depth = _array(self.lr_depth)
        self.hr_guidance = _array(self.hr_guidance)
        if self.scale is None:
            self.scale = self.model.config.scale
        if self.lr_depth.ndim != 4 or self.lr_depth.shape[:2] != (1, 1):
            raise DimensionError(f"lr_depth must be 1x1xhxw, got {self.lr_depth.shape}")
        cfg = self.model.config
        if self.scale != cfg.scale:
            raise ConfigurationError(f"request scale {self.scale}, model trained for {cfg.scale}")
        if cfg.guided:
            if self.hr_guidance is None:
                raise ConfigurationError("guidance required: the model is guided")
            expected = (1, cfg.guide_channels) + self.hr_size
            if self.hr_guidance.shape != expected:
                raise DimensionError(
                    f"guidance shape {self.hr_guidance.shape}, expected {expected}"
                )

    @property
    def hr_size(self):
        h, w = self.lr_depth.shape[2:]
        return (h * self.scale, w * self.scale)


def compute_fields(model, guidance, target_up):
    if isinstance(model, DknModel):
        return shift_and_stitch(model, guidance, target_up)
    return fdkn_fields(model, guidance, target_up)


def upsample(request):
    """High-resolution depth map (1, 1, r*h, r*w) for ``request``."""
    model = request.model
    cfg = model.config
    H, W = request.hr_size
    target_up = bicubic_resize(request.lr_depth, H, W).astype(model.dtype)
    guidance = request.hr_guidance if cfg.guided else None
    was_training = model.training
    model.eval()
    try:
        with no_grad(), thread_limits():
            kernels, offsets = compute_fields(model, guidance, target_up)
            out = deformable_weighted_average(target_up, kernels, offsets, cfg.grid,
                                              cfg.residual)
    finally:
        model.train(was_training)
    result = out.data
    if not np.all(np.isfinite(result)):
        raise ConfigurationError("upsampled depth contains non-finite values")
    return result
