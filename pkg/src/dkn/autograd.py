"""Dense NCHW tensors with a dynamic reverse-mode tape.

Every differentiable op builds its output with :meth:`Tensor.from_op`,
passing the parents and a closure mapping the output gradient to one
gradient per parent. The tape is rebuilt on every forward pass.
"""

import contextlib

import numpy as np

from dkn import kernels
from dkn.errors import ConfigurationError, ContractError, DimensionError
from dkn.parallel import matmul, num_threads

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


_branch_trace = None


@contextlib.contextmanager
def branch_trace():
    """Record the branch every non-smooth op takes (relu masks, clamps, ...).

    Two evaluations with equal traces lie on the same smooth piece, which is
    what finite-difference checks need to know.
    """
    global _branch_trace
    previous = _branch_trace
    _branch_trace = trace = []
    try:
        yield trace
    finally:
        _branch_trace = previous


def record_branch(pattern):
    if _branch_trace is not None:
        pattern = np.asarray(pattern)
        if pattern.dtype == bool:
            pattern = np.packbits(pattern)
        _branch_trace.append(pattern.tobytes())


def _as_float_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A value plus, when recorded, the op that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @classmethod
    def from_op(cls, data, parents, backward_fn, op):
        out = cls(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.op = op
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self, params=None):
        return backward(self, params)


class Parameter(Tensor):
    """A named trainable leaf."""

    __slots__ = ()

    def __init__(self, data, name, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _topological_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss, params=None):
    """Reverse-mode accumulation from a scalar ``loss``.

    Gradients are written to ``.grad`` of every reachable leaf that requires
    grad (overwriting earlier values). Returns ``{name: gradient}`` for the
    named leaves reached; if ``params`` (a name -> Parameter mapping) is
    given, the map covers exactly those parameters and unreachable ones get
    zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {}
    result = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topological_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g
                if node.name is not None:
                    result[node.name] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if params is None:
        return result
    out = {}
    for name, p in params.items():
        if name in result:
            out[name] = result[name]
        else:
            p.grad = np.zeros_like(p.data)
            out[name] = p.grad
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------------
# pointwise


def add(a, b):
    """Sum of two tensors; ``b`` may be a constant broadcast against ``a``."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data + b.data
    if out.shape != a.shape and out.shape != b.shape:
        raise DimensionError(f"add: cannot combine {a.shape} and {b.shape}")
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor.from_op(out, (a, b), grad_fn, "add")


def sub(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data - b.data
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return Tensor.from_op(out, (a, b), grad_fn, "sub")


def scale(a, factor):
    a = as_tensor(a)
    factor = a.data.dtype.type(factor)

    def grad_fn(g):
        return (g * factor,)

    return Tensor.from_op(a.data * factor, (a,), grad_fn, "scale")


def mul(a, b):
    """Hadamard product of equally shaped tensors."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g * bd, g * ad

    return Tensor.from_op(ad * bd, (a, b), grad_fn, "mul")


elementwise_mul = mul


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    record_branch(mask)

    def grad_fn(g):
        return (g * mask,)

    # np.maximum keeps NaN, so a diverged activation is not silently zeroed
    return Tensor.from_op(np.maximum(x.data, 0).astype(x.dtype), (x,), grad_fn, "relu")


def sigmoid(x):
    x = as_tensor(x)
    y = np.exp(-np.logaddexp(0, -x.data)).astype(x.dtype)

    def grad_fn(g):
        return (g * y * (1 - y),)

    return Tensor.from_op(y, (x,), grad_fn, "sigmoid")


def clamp(x, lo, hi):
    """Clamp into [lo, hi]; zero gradient wherever the bound is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    record_branch(inside)
    out = np.where(inside, x.data, np.clip(x.data, lo, hi)).astype(x.dtype)

    def grad_fn(g):
        return (g * inside,)

    return Tensor.from_op(out, (x,), grad_fn, "clamp")


def total(x):
    """Sum of all elements, kept as a tensor of shape (1,)*ndim."""
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(keepdims=True)

    def grad_fn(g):
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(out, (x,), grad_fn, "sum")


def channel_center(x):
    """Subtract the per-pixel mean over channels."""
    x = as_tensor(x)
    c = x.shape[1]
    out = x.data - x.data.mean(axis=1, keepdims=True)

    def grad_fn(g):
        return (g - g.sum(axis=1, keepdims=True) / c,)

    return Tensor.from_op(out, (x,), grad_fn, "channel_center")


def channel_normalize(x):
    """Divide by the per-pixel channel sum (L1 normalization of positives)."""
    x = as_tensor(x)
    s = x.data.sum(axis=1, keepdims=True)
    out = x.data / s

    def grad_fn(g):
        return ((g - (g * out).sum(axis=1, keepdims=True)) / s,)

    return Tensor.from_op(out, (x,), grad_fn, "channel_normalize")


def crop(x, top, left, height, width):
    x = as_tensor(x)
    shape = x.shape
    window = (Ellipsis, slice(top, top + height), slice(left, left + width))
    out = np.ascontiguousarray(x.data[window])
    if out.shape[-2:] != (height, width):
        raise DimensionError(f"crop window {height}x{width}@({top},{left}) exceeds {shape}")

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[window] = g
        return (full,)

    return Tensor.from_op(out, (x,), grad_fn, "crop")


# ----------------------------------------------------------------------
# convolution and normalization


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation of NCHW ``x`` with OIkk ``weight``."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {ci}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d: invalid stride={stride} padding={padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigurationError(
            f"conv2d: {kh}x{kw} kernel with stride {stride}, padding {padding} "
            f"does not fit a {h}x{w} input"
        )
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise DimensionError(f"conv2d: bias shape {bias.shape}, expected ({o},)")

    xp = np.ascontiguousarray(x.data)
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    threads = num_threads()
    cols = kernels.im2col(xp, kh, kw, stride, threads)
    wmat = weight.data.reshape(o, -1)
    out = matmul(wmat, cols, threads).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]
    padded_shape = xp.shape
    need_x = x.requires_grad

    def grad_fn(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = matmul(gmat, cols.T, threads).reshape(weight.shape)
        gb = gmat.sum(axis=1) if bias is not None else None
        gx = None
        if need_x:
            gcols = matmul(wmat.T, gmat, threads)
            gx = kernels.col2im(gcols, padded_shape, kh, kw, stride, threads)
            if padding:
                gx = np.ascontiguousarray(gx[:, :, padding:-padding, padding:-padding])
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out, parents, grad_fn, "conv2d")


def batch_norm(x, scale, shift, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Per-channel normalization over (N, H, W).

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` (numpy arrays) are updated in place by an exponential
    moving average; in eval mode the running statistics are used.
    """
    x = as_tensor(x)
    scale = as_tensor(scale)
    shift = as_tensor(shift)
    n, c, h, w = x.shape
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"batch_norm: scale/shift must have length {c}")
    count = n * h * w
    if count == 0:
        raise ConfigurationError("batch_norm: zero spatial extent")
    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    gamma = scale.data[None, :, None, None]
    out = gamma * xhat + shift.data[None, :, None, None]

    def grad_fn(g):
        gshift = g.sum(axis=axes)
        gscale = (g * xhat).sum(axis=axes)
        if training:
            gx = (gamma * inv[None, :, None, None] / count) * (
                count * g
                - gshift[None, :, None, None]
                - xhat * gscale[None, :, None, None]
            )
        else:
            gx = g * gamma * inv[None, :, None, None]
        return gx, gscale, gshift

    return Tensor.from_op(out.astype(x.dtype), (x, scale, shift), grad_fn, "batch_norm")


# ----------------------------------------------------------------------
# resampling


def pixel_unshuffle(x, r):
    """(N, C, H, W) -> (N, C*r*r, H/r, W/r).

    Output channel ``c*r*r + dy*r + dx`` at (y, x) holds input channel ``c``
    at (y*r + dy, x*r + dx).
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % r or w % r:
        raise DimensionError(f"pixel_unshuffle: {h}x{w} not divisible by stride {r}")
    out = (x.data.reshape(n, c, h // r, r, w // r, r)
           .transpose(0, 1, 3, 5, 2, 4)
           .reshape(n, c * r * r, h // r, w // r))

    def grad_fn(g):
        return (_shuffle_array(g, r),)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), grad_fn, "pixel_unshuffle")


def _shuffle_array(a, r):
    n, cr, h, w = a.shape
    c = cr // (r * r)
    return np.ascontiguousarray(
        a.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)
    )


def pixel_shuffle(x, r):
    """Exact inverse of :func:`pixel_unshuffle`."""
    x = as_tensor(x)
    n, cr, h, w = x.shape
    if cr % (r * r):
        raise DimensionError(f"pixel_shuffle: {cr} channels not divisible by {r * r}")

    def grad_fn(g):
        return (pixel_unshuffle(Tensor(g), r).data,)

    return Tensor.from_op(_shuffle_array(x.data, r), (x,), grad_fn, "pixel_shuffle")
