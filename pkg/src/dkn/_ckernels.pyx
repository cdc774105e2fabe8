# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: im2col/col2im and the bilinear sampler.

Every parallel loop writes disjoint outputs and keeps a fixed accumulation
order per output element, so results are identical for any thread count.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport ceil

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _clip(Py_ssize_t v, Py_ssize_t hi) noexcept nogil:
    if v < 0:
        return 0
    if v > hi:
        return hi
    return v


def im2col(real[:, :, :, ::1] x, int kh, int kw, int stride, int num_threads=1):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h - kh) // stride + 1
    cdef Py_ssize_t wo = (w - kw) // stride + 1
    cdef Py_ssize_t rows = c * kh * kw, cols_n = n * ho * wo
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((rows, cols_n), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t r, ch, i, j, b, oy, ox, col
    for r in prange(rows, nogil=True, num_threads=num_threads, schedule="static"):
        ch = r // (kh * kw)
        i = (r // kw) % kh
        j = r % kw
        col = 0
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    out[r, col] = x[b, ch, oy * stride + i, ox * stride + j]
                    col = col + 1
    return out_arr


def col2im(real[:, ::1] cols, shape, int kh, int kw, int stride, int num_threads=1):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t ho = (h - kh) // stride + 1
    cdef Py_ssize_t wo = (w - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t plane, b, ch, i, j, oy, ox, r, col
    for plane in prange(n * c, nogil=True, num_threads=num_threads, schedule="static"):
        b = plane // c
        ch = plane % c
        for i in range(kh):
            for j in range(kw):
                r = (ch * kh + i) * kw + j
                col = b * ho * wo
                for oy in range(ho):
                    for ox in range(wo):
                        out[b, ch, oy * stride + i, ox * stride + j] += cols[r, col]
                        col = col + 1
    return out_arr


cdef inline real _clampf(real p, Py_ssize_t size) noexcept nogil:
    if p < 0:
        return 0
    if p > size - 1:
        return size - 1
    return p


# Corner indices and weights are assigned directly in each prange body (not
# through pointers) so Cython makes them thread-private.


def bilinear_forward(real[:, :, :, ::1] img, real[:, :, :, ::1] pos, int num_threads=1):
    cdef Py_ssize_t n = img.shape[0], c = img.shape[1], h = img.shape[2], w = img.shape[3]
    cdef Py_ssize_t taps = pos.shape[1] // 2, oh = pos.shape[2], ow = pos.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c * taps, oh, ow), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t row, b, t, i, j, ch, x0, x1, y0, y1
    cdef real px, py, qx, qy, fx, fy, wx, wy, top, bottom
    cdef bint inx, iny
    for row in prange(n * taps * oh, nogil=True, num_threads=num_threads, schedule="static"):
        b = row // (taps * oh)
        t = (row // oh) % taps
        i = row % oh
        for j in range(ow):
            px = pos[b, 2 * t, i, j]
            inx = px >= 0 and px <= w - 1
            qx = _clampf(px, w)
            fx = <real>ceil(qx) - 1
            wx = qx - fx
            x0 = _clip(<Py_ssize_t>fx, w - 1)
            x1 = _clip(<Py_ssize_t>fx + 1, w - 1)
            py = pos[b, 2 * t + 1, i, j]
            iny = py >= 0 and py <= h - 1
            qy = _clampf(py, h)
            fy = <real>ceil(qy) - 1
            wy = qy - fy
            y0 = _clip(<Py_ssize_t>fy, h - 1)
            y1 = _clip(<Py_ssize_t>fy + 1, h - 1)
            for ch in range(c):
                top = (1 - wx) * img[b, ch, y0, x0] + wx * img[b, ch, y0, x1]
                bottom = (1 - wx) * img[b, ch, y1, x0] + wx * img[b, ch, y1, x1]
                out[b, ch * taps + t, i, j] = (1 - wy) * top + wy * bottom
    return out_arr


def bilinear_backward(real[:, :, :, ::1] img, real[:, :, :, ::1] pos,
                      real[:, :, :, ::1] grad, bint need_img=True, bint need_pos=True,
                      int num_threads=1):
    cdef Py_ssize_t n = img.shape[0], c = img.shape[1], h = img.shape[2], w = img.shape[3]
    cdef Py_ssize_t taps = pos.shape[1] // 2, oh = pos.shape[2], ow = pos.shape[3]
    dtype = np.float32 if real is float else np.float64
    grad_img_arr = np.zeros((n, c, h, w), dtype=dtype) if need_img else None
    grad_pos_arr = np.zeros((n, 2 * taps, oh, ow), dtype=dtype) if need_pos else None
    cdef real[:, :, :, ::1] gi
    cdef real[:, :, :, ::1] gp
    cdef Py_ssize_t row, plane, b, t, i, j, ch, x0, x1, y0, y1
    cdef real px, py, qx, qy, fx, fy, wx, wy, g, dx, dy
    cdef bint inx, iny

    if need_pos:
        gp = grad_pos_arr
        for row in prange(n * taps * oh, nogil=True, num_threads=num_threads, schedule="static"):
            b = row // (taps * oh)
            t = (row // oh) % taps
            i = row % oh
            for j in range(ow):
                px = pos[b, 2 * t, i, j]
                inx = px >= 0 and px <= w - 1
                qx = _clampf(px, w)
                fx = <real>ceil(qx) - 1
                wx = qx - fx
                x0 = _clip(<Py_ssize_t>fx, w - 1)
                x1 = _clip(<Py_ssize_t>fx + 1, w - 1)
                py = pos[b, 2 * t + 1, i, j]
                iny = py >= 0 and py <= h - 1
                qy = _clampf(py, h)
                fy = <real>ceil(qy) - 1
                wy = qy - fy
                y0 = _clip(<Py_ssize_t>fy, h - 1)
                y1 = _clip(<Py_ssize_t>fy + 1, h - 1)
                for ch in range(c):
                    g = grad[b, ch * taps + t, i, j]
                    dx = (1 - wy) * (img[b, ch, y0, x1] - img[b, ch, y0, x0]) + wy * (img[b, ch, y1, x1] - img[b, ch, y1, x0])
                    dy = (1 - wx) * (img[b, ch, y1, x0] - img[b, ch, y0, x0]) + wx * (img[b, ch, y1, x1] - img[b, ch, y0, x1])
                    if inx:
                        gp[b, 2 * t, i, j] += g * dx
                    if iny:
                        gp[b, 2 * t + 1, i, j] += g * dy

    if need_img:
        gi = grad_img_arr
        # one plane per thread keeps the scatter order fixed
        for plane in prange(n * c, nogil=True, num_threads=num_threads, schedule="static"):
            b = plane // c
            ch = plane % c
            for t in range(taps):
                for i in range(oh):
                    for j in range(ow):
                        px = pos[b, 2 * t, i, j]
                        inx = px >= 0 and px <= w - 1
                        qx = _clampf(px, w)
                        fx = <real>ceil(qx) - 1
                        wx = qx - fx
                        x0 = _clip(<Py_ssize_t>fx, w - 1)
                        x1 = _clip(<Py_ssize_t>fx + 1, w - 1)
                        py = pos[b, 2 * t + 1, i, j]
                        iny = py >= 0 and py <= h - 1
                        qy = _clampf(py, h)
                        fy = <real>ceil(qy) - 1
                        wy = qy - fy
                        y0 = _clip(<Py_ssize_t>fy, h - 1)
                        y1 = _clip(<Py_ssize_t>fy + 1, h - 1)
                        g = grad[b, ch * taps + t, i, j]
                        gi[b, ch, y0, x0] += g * (1 - wy) * (1 - wx)
                        gi[b, ch, y0, x1] += g * (1 - wy) * wx
                        gi[b, ch, y1, x0] += g * wy * (1 - wx)
                        gi[b, ch, y1, x1] += g * wy * wx
    return grad_img_arr, grad_pos_arr
