"""Deformable sampling and weighted averaging.

Offset fields hold ``k*k`` interleaved ``(dx, dy)`` pairs in row-major tap
order. Sampling positions are ``(x, y)`` = (column, row) in pixels of the
target image; samples outside the image are clamped to its border.
"""

import os
from dataclasses import dataclass

import numpy as np

from dkn import kernels
from dkn.autograd import Tensor, add, as_tensor, record_branch
from dkn.errors import ConfigurationError, ContractError, DimensionError
from dkn.parallel import num_threads, thread_limits

DEBUG = os.environ.get("DKN_DEBUG", "") not in ("", "0")


@dataclass(frozen=True)
class GridSpec:
    """A ``k x k`` tap lattice around each pixel plus the offset window radius."""

    k: int = 3
    radius: int = 7

    def __post_init__(self):
        if self.k not in (3, 5, 7):
            raise ConfigurationError(f"kernel size must be 3, 5 or 7, got {self.k}")
        if self.radius < self.k // 2:
            raise ConfigurationError("offset window smaller than the kernel lattice")

    @property
    def taps(self):
        return self.k * self.k

    def base(self, dtype=np.float32):
        """Regular-grid displacements, shape (2*k*k,), interleaved (dx, dy)."""
        half = self.k // 2
        out = np.empty(2 * self.taps, dtype=dtype)
        for i in range(self.k):
            for j in range(self.k):
                t = i * self.k + j
                out[2 * t] = j - half
                out[2 * t + 1] = i - half
        return out


def _tracing():
    from dkn import autograd

    return autograd._branch_trace is not None


def _record_cells(pos, h, w):
    """Branch pattern of the sampler: lattice cell and clamp state per position."""
    x, y = pos[:, 0::2], pos[:, 1::2]
    record_branch(np.stack([np.ceil(np.clip(x, 0, w - 1)), np.ceil(np.clip(y, 0, h - 1)),
                            (x >= 0) & (x <= w - 1), (y >= 0) & (y <= h - 1)]).astype(np.int32))


def bilinear_sample(image, positions):
    """Bilinearly sample ``image`` (N, C, H, W) at ``positions`` (N, 2T, h, w).

    Returns (N, C*T, h, w); channel ``c*T + t`` holds channel ``c`` sampled at
    tap ``t``. Differentiable in both the image and the positions.
    """
    image = as_tensor(image)
    positions = as_tensor(positions, like=image)
    if image.ndim != 4 or positions.ndim != 4 or positions.shape[1] % 2:
        raise DimensionError(
            f"bilinear_sample: bad shapes image={image.shape} positions={positions.shape}"
        )
    if positions.shape[0] != image.shape[0]:
        raise DimensionError("bilinear_sample: batch sizes differ")
    img = np.ascontiguousarray(image.data)
    pos = np.ascontiguousarray(positions.data, dtype=img.dtype)
    threads = num_threads()
    if _tracing():
        _record_cells(pos, img.shape[2], img.shape[3])
    out = kernels.bilinear_forward(img, pos, threads)
    need_img, need_pos = image.requires_grad, positions.requires_grad

    def grad_fn(g):
        gi, gp = kernels.bilinear_backward(
            img, pos, np.ascontiguousarray(g), need_img, need_pos, threads
        )
        return gi, gp

    return Tensor.from_op(out, (image, positions), grad_fn, "bilinear_sample")


def restrict_offsets(raw, grid):
    """Clamp every sampling displacement into the ``(2R+1)^2`` window.

    Displacements already inside pass through unchanged; clamped ones get a
    zero gradient.
    """
    raw = as_tensor(raw)
    if raw.ndim != 4 or raw.shape[1] != 2 * grid.taps:
        raise DimensionError(
            f"offset field needs {2 * grid.taps} channels, got shape {raw.shape}"
        )
    base = grid.base(raw.dtype)[None, :, None, None]
    disp = raw.data + base
    inside = (disp >= -grid.radius) & (disp <= grid.radius)
    record_branch(inside)
    out = np.where(inside, raw.data, np.clip(disp, -grid.radius, grid.radius) - base)

    def grad_fn(g):
        return (g * inside,)

    return Tensor.from_op(out.astype(raw.dtype), (raw,), grad_fn, "restrict_offsets")


def _tap_sum(samples, weights, channels):
    """out[n, c] = sum_t weights[n, t] * samples[n, c*T + t]."""
    n, t = weights.shape[:2]
    s = samples.data.reshape(n, channels, t, *samples.shape[2:])
    w = weights.data
    out = (s * w[:, None]).sum(axis=2)

    def grad_fn(g):
        gs = (g[:, :, None] * w[:, None]).reshape(samples.shape)
        gw = (g[:, :, None] * s).sum(axis=1)
        return gs, gw

    return Tensor.from_op(out, (samples, weights), grad_fn, "tap_sum")


def _take_grid(x, ys, xs):
    shape = x.shape
    out = np.ascontiguousarray(x.data[:, :, ys[:, None], xs[None, :]])

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, :, ys[:, None], xs[None, :]] = g
        return (full,)

    return Tensor.from_op(out, (x,), grad_fn, "take_grid")


def check_kernels(kernels_data, residual, tol=1e-5):
    """Raise ContractError if a kernel field breaks its variant's invariant."""
    sums = kernels_data.sum(axis=1)
    if residual:
        ok = np.all(np.abs(sums) < tol) and np.all(np.abs(kernels_data) < 1)
        what = "residual kernels must sum to 0 with taps in (-1, 1)"
    else:
        ok = np.all(np.abs(sums - 1) < tol) and np.all(kernels_data >= 0)
        what = "non-residual kernels must be non-negative and sum to 1"
    if not ok:
        raise ContractError(what)


def sampling_positions(offsets, grid, centers):
    """Absolute positions ``center + base + offset`` as a (N, 2T, h, w) tensor."""
    ys, xs = centers
    dtype = offsets.dtype
    grid_xy = np.empty((1, 2, len(ys), len(xs)), dtype=dtype)
    grid_xy[0, 0] = np.asarray(xs, dtype=dtype)[None, :]
    grid_xy[0, 1] = np.asarray(ys, dtype=dtype)[:, None]
    base = grid.base(dtype)[None, :, None, None]
    const = np.tile(grid_xy, (1, grid.taps, 1, 1)) + base
    return add(offsets, const)


def deformable_weighted_average(target, kernels_, offsets, grid, residual,
                                centers=None, validate=None):
    """Weighted average of deformably sampled target values.

    ``residual=True`` returns ``f_p + sum_q K f(s(q))``; otherwise
    ``sum_q K f(s(q))``. With ``centers=None`` the fields are aligned with
    every target pixel; otherwise ``centers=(ys, xs)`` lists the rows and
    columns of the output lattice the fields belong to.
    """
    target = as_tensor(target)
    kernels_ = as_tensor(kernels_, like=target)
    offsets = as_tensor(offsets, like=target)
    n, c, h, w = target.shape
    if centers is None:
        centers = (np.arange(h), np.arange(w))
    ys = np.asarray(centers[0], dtype=np.intp)
    xs = np.asarray(centers[1], dtype=np.intp)
    field_shape = (n, grid.taps, len(ys), len(xs))
    if kernels_.shape != field_shape:
        raise DimensionError(f"kernel field shape {kernels_.shape}, expected {field_shape}")
    if offsets.shape != (n, 2 * grid.taps, len(ys), len(xs)):
        raise DimensionError(
            f"offset field shape {offsets.shape}, expected {(n, 2 * grid.taps, len(ys), len(xs))}"
        )
    if validate or (validate is None and DEBUG):
        check_kernels(kernels_.data, residual)
    positions = sampling_positions(offsets, grid, (ys, xs))
    samples = bilinear_sample(target, positions)
    out = _tap_sum(samples, kernels_, c)
    if residual:
        out = add(_take_grid(target, ys, xs), out)
    return out


# ----------------------------------------------------------------------
# bicubic resampling (data preparation only, not differentiable)

CUBIC_A = -0.5


def _cubic(t, a=CUBIC_A):
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _resize_matrix(n_in, n_out):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    first = np.floor(src).astype(np.intp) - 1
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for k in range(4):
        idx = first + k
        wts = _cubic(src - idx)
        np.add.at(m, (rows, np.clip(idx, 0, n_in - 1)), wts)
    return m


def bicubic_resize(image, out_height, out_width):
    """Resize an (N, C, H, W) array with an edge-clamped cubic kernel."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if out_height < 1 or out_width < 1:
        raise ConfigurationError(f"output size must be positive, got {out_height}x{out_width}")
    h, w = data.shape[-2:]
    if (h, w) == (out_height, out_width):
        return data.copy()
    my = _resize_matrix(h, out_height)
    mx = _resize_matrix(w, out_width)
    with thread_limits():  # einsum may call a threaded dgemm
        out = np.einsum("ih,nchw,jw->ncij", my, data.astype(np.float64), mx, optimize=True)
    return out.astype(data.dtype)
