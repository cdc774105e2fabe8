"""Pure numpy implementations of the hot loops.

Mirrors the compiled ``_ckernels`` module function for function. Used when
the extension is unavailable or ``DKN_PURE_PYTHON=1`` is set.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, num_threads=1):
    """Unfold ``x`` (N, C, H, W) into columns of shape (C*kh*kw, N*Ho*Wo)."""
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(
        c * kh * kw, n * ho * wo
    )


def col2im(cols, shape, kh, kw, stride, num_threads=1):
    """Adjoint of :func:`im2col`: scatter-add columns back into ``shape``."""
    n, c, h, w = shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (ho - 1) + 1:stride,
                j:j + stride * (wo - 1) + 1:stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    return out


def _corners(pos, height, width):
    px = pos[:, 0::2]
    py = pos[:, 1::2]
    x = np.clip(px, 0, width - 1)
    y = np.clip(py, 0, height - 1)
    # left-continuous: an integer coordinate sits on the upper corner
    x0 = np.ceil(x) - 1
    y0 = np.ceil(y) - 1
    wx = (x - x0).astype(pos.dtype)
    wy = (y - y0).astype(pos.dtype)
    ix0 = np.clip(x0, 0, width - 1).astype(np.intp)
    iy0 = np.clip(y0, 0, height - 1).astype(np.intp)
    ix1 = np.clip(x0 + 1, 0, width - 1).astype(np.intp)
    iy1 = np.clip(y0 + 1, 0, height - 1).astype(np.intp)
    inside_x = (px >= 0) & (px <= width - 1)
    inside_y = (py >= 0) & (py <= height - 1)
    return wx, wy, ix0, iy0, ix1, iy1, inside_x, inside_y


def bilinear_forward(img, pos, num_threads=1):
    """Sample ``img`` (N, C, H, W) at ``pos`` (N, 2T, h, w) -> (N, C*T, h, w)."""
    n, c, height, width = img.shape
    t = pos.shape[1] // 2
    wx, wy, ix0, iy0, ix1, iy1, _, _ = _corners(pos, height, width)
    out = np.empty((n, c, t) + pos.shape[2:], dtype=img.dtype)
    b = np.arange(n)[:, None, None, None]
    for ch in range(c):
        plane = img[:, ch]
        v00 = plane[b, iy0, ix0]
        v01 = plane[b, iy0, ix1]
        v10 = plane[b, iy1, ix0]
        v11 = plane[b, iy1, ix1]
        top = (1 - wx) * v00 + wx * v01
        bottom = (1 - wx) * v10 + wx * v11
        out[:, ch] = (1 - wy) * top + wy * bottom
    return out.reshape(n, c * t, *pos.shape[2:])


def bilinear_backward(img, pos, grad, need_img=True, need_pos=True, num_threads=1):
    n, c, height, width = img.shape
    t = pos.shape[1] // 2
    wx, wy, ix0, iy0, ix1, iy1, inside_x, inside_y = _corners(pos, height, width)
    grad = grad.reshape(n, c, t, *pos.shape[2:])
    b = np.arange(n)[:, None, None, None]
    grad_img = np.zeros_like(img) if need_img else None
    grad_pos = np.zeros_like(pos) if need_pos else None
    plane_size = height * width
    for ch in range(c):
        g = grad[:, ch]
        if need_img:
            base = (np.arange(n) * plane_size)[:, None, None, None]
            idx = np.concatenate([
                (base + iy0 * width + ix0).ravel(),
                (base + iy0 * width + ix1).ravel(),
                (base + iy1 * width + ix0).ravel(),
                (base + iy1 * width + ix1).ravel(),
            ])
            w = np.concatenate([
                (g * (1 - wy) * (1 - wx)).ravel(),
                (g * (1 - wy) * wx).ravel(),
                (g * wy * (1 - wx)).ravel(),
                (g * wy * wx).ravel(),
            ])
            acc = np.bincount(idx, weights=w, minlength=n * plane_size)
            grad_img[:, ch] += acc.reshape(n, height, width).astype(img.dtype)
        if need_pos:
            plane = img[:, ch]
            v00 = plane[b, iy0, ix0]
            v01 = plane[b, iy0, ix1]
            v10 = plane[b, iy1, ix0]
            v11 = plane[b, iy1, ix1]
            dx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
            dy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
            grad_pos[:, 0::2] += np.where(inside_x, g * dx, 0)
            grad_pos[:, 1::2] += np.where(inside_y, g * dy, 0)
    return grad_img, grad_pos
