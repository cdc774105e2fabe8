"""Procedural RGB-D scenes standing in for a real training set.

Depth is a tilted background plane overlaid with constant-depth ellipses
and star-shaped polygons. The color image shares those region boundaries, with
a random albedo per region plus texture that does not follow depth.
"""

from dataclasses import dataclass

import numpy as np

from dkn.errors import ConfigurationError

MIN_SIZE = 64
MIN_STEP = 0.15


@dataclass
class ScenePair:
    hr_color: np.ndarray  # (1, 3, H, W) in [0, 1]
    hr_depth: np.ndarray  # (1, 1, H, W) in [0, 1]
    tag: str = ""

    def __post_init__(self):
        if self.hr_color.shape[2:] != self.hr_depth.shape[2:]:
            raise ConfigurationError(
                f"color {self.hr_color.shape} and depth {self.hr_depth.shape} sizes differ"
            )

    @property
    def size(self):
        return self.hr_depth.shape[2:]


def _ellipse(rng, yy, xx, h, w):
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    ry = rng.uniform(0.08, 0.3) * h
    rx = rng.uniform(0.08, 0.3) * w
    theta = rng.uniform(0, np.pi)
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _polygon(rng, yy, xx, h, w):
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    n = int(rng.integers(3, 7))
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    radii = rng.uniform(0.1, 0.3, n) * min(h, w)
    py = cy + radii * np.sin(angles)
    px = cx + radii * np.cos(angles)
    # fan of triangles around the center: a star-shaped polygon
    inside = np.zeros_like(yy, dtype=bool)
    for i in range(n):
        j = (i + 1) % n
        inside |= _in_triangle(yy, xx, (cy, cx), (py[i], px[i]), (py[j], px[j]))
    return inside


def _in_triangle(yy, xx, a, b, c):
    def side(p, q):
        return (xx - q[1]) * (p[0] - q[0]) - (p[1] - q[1]) * (yy - q[0])

    d1, d2, d3 = side(a, b), side(b, c), side(c, a)
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(neg & pos)


def _smooth_noise(rng, h, w, cells):
    coarse = rng.uniform(-1, 1, (cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def generate_scene(seed, height=96, width=96):
    """Deterministic synthetic :class:`ScenePair` for ``seed``."""
    if height < MIN_SIZE or width < MIN_SIZE:
        raise ConfigurationError(f"scenes need at least {MIN_SIZE}x{MIN_SIZE} pixels")
    rng = np.random.default_rng([seed, height, width])
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)

    gy, gx = rng.uniform(-0.25, 0.25, 2)
    depth = 0.5 + gy * (yy / height - 0.5) + gx * (xx / width - 0.5)
    labels = np.zeros((height, width), dtype=np.int64)

    n_shapes = int(rng.integers(5, 10))
    for k in range(1, n_shapes + 1):
        mask = (_ellipse if rng.uniform() < 0.5 else _polygon)(rng, yy, xx, height, width)
        if not mask.any():
            continue
        under = depth[mask].mean()
        # keep every shape visibly separated from what it covers
        value = rng.uniform(0.05, 0.95)
        if abs(value - under) < MIN_STEP:
            value = under + MIN_STEP if under < 0.5 else under - MIN_STEP
        tilt_y, tilt_x = rng.uniform(-0.05, 0.05, 2)
        depth = np.where(mask, value + tilt_y * (yy / height - 0.5) + tilt_x * (xx / width - 0.5),
                         depth)
        labels[mask] = k
    depth = np.clip(depth, 0.0, 1.0)

    albedo = rng.uniform(0.1, 0.9, (n_shapes + 1, 3))
    color = albedo[labels].transpose(2, 0, 1)
    shading = 0.15 * _smooth_noise(rng, height, width, 4)
    texture = 0.06 * np.sin(2 * np.pi * (xx * rng.uniform(0.05, 0.2) + yy * rng.uniform(0.05, 0.2)))
    stripes = texture * (rng.uniform(size=n_shapes + 1)[labels] < 0.4)
    noise = rng.normal(0, 0.01, (3, height, width))
    color = np.clip(color + shading + stripes + noise, 0.0, 1.0)

    return ScenePair(
        hr_color=color[None].astype(np.float32),
        hr_depth=depth[None, None].astype(np.float32),
        tag=f"synthetic:{seed}",
    )


def discontinuity_fraction(depth, threshold=0.1):
    """Fraction of pixels whose forward-difference gradient magnitude exceeds ``threshold``."""
    d = np.asarray(depth, dtype=np.float64).reshape(depth.shape[-2:])
    gy = np.zeros_like(d)
    gx = np.zeros_like(d)
    gy[:-1] = d[1:] - d[:-1]
    gx[:, :-1] = d[:, 1:] - d[:, :-1]
    return float((np.hypot(gx, gy) > threshold).mean())
