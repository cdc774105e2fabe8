"""RMSE in physical units and evaluation reports."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from dkn.errors import DimensionError

# physical units per normalized depth unit for the built-in protocols
PROTOCOL_SCALES = {"nyu": 1000.0, "scaled255": 255.0}


@dataclass
class DepthImage:
    samples: np.ndarray  # (H, W)
    value_scale: float = 1.0
    mask: Optional[np.ndarray] = None  # True = counted

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 4 and s.shape[:2] == (1, 1):
            s = s[0, 0]
        if s.ndim != 2:
            raise DimensionError(f"depth image must be 2-D, got shape {s.shape}")
        self.samples = s
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != s.shape:
                raise DimensionError(f"mask {self.mask.shape} vs image {s.shape}")

    @property
    def height(self):
        return self.samples.shape[0]

    @property
    def width(self):
        return self.samples.shape[1]


def border_mask(shape, border):
    mask = np.zeros(shape, dtype=bool)
    h, w = shape
    if border * 2 < h and border * 2 < w:
        mask[border:h - border, border:w - border] = True
    return mask


def rmse(pred, gt):
    """Root mean squared difference over pixels valid in both masks, in physical units."""
    if pred.samples.shape != gt.samples.shape:
        raise DimensionError(f"rmse: shapes {pred.samples.shape} vs {gt.samples.shape}")
    if pred.value_scale != gt.value_scale:
        raise DimensionError(
            f"rmse: value scales differ ({pred.value_scale} vs {gt.value_scale})"
        )
    mask = np.ones(gt.samples.shape, dtype=bool)
    for m in (pred.mask, gt.mask):
        if m is not None:
            mask &= m
    if not mask.any():
        raise DimensionError("rmse: mask selects no pixels")
    d = (pred.samples - gt.samples)[mask]
    return float(np.sqrt(np.mean(d * d)) * gt.value_scale)


@dataclass
class EvalReport:
    method: str
    names: list = field(default_factory=list)
    rmse: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def add(self, name, value, seconds):
        self.names.append(name)
        self.rmse.append(float(value))
        self.seconds.append(float(seconds))

    @property
    def mean_rmse(self):
        return float(np.mean(self.rmse)) if self.rmse else float("nan")

    @property
    def mean_seconds(self):
        return float(np.mean(self.seconds)) if self.seconds else float("nan")

    def lines(self):
        out = [f"{name}\trmse={r:.4f}\ttime={t:.3f}s"
               for name, r, t in zip(self.names, self.rmse, self.seconds)]
        out.append(f"average rmse {self.mean_rmse:.4f} over {len(self.rmse)} images "
                   f"({self.method})")
        out.append("")
        out.append(f"method={self.method}")
        out.append(f"images={len(self.rmse)}")
        out.append(f"mean_rmse={self.mean_rmse:.6f}")
        out.append(f"mean_seconds={self.mean_seconds:.6f}")
        for name, r in zip(self.names, self.rmse):
            out.append(f"rmse.{name}={r:.6f}")
        return out

    def text(self):
        return "\n".join(self.lines()) + "\n"
