"""Backend selection for the hot loops.

The compiled extension is preferred; the numpy fallback is used when the
extension is missing or when ``DKN_PURE_PYTHON=1``.
"""

import os

from dkn import _npkernels as numpy_backend

try:
    if os.environ.get("DKN_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("compiled kernels disabled by DKN_PURE_PYTHON")
    from dkn import _ckernels as compiled_backend
except ImportError:
    compiled_backend = None

backend = compiled_backend if compiled_backend is not None else numpy_backend
BACKEND = "cython" if compiled_backend is not None else "numpy"

im2col = backend.im2col
col2im = backend.col2im
bilinear_forward = backend.bilinear_forward
bilinear_backward = backend.bilinear_backward
