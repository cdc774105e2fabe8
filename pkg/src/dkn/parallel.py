"""Thread-count control.

``DKN_THREADS`` sets the OpenMP thread count of the compiled kernels and the
size of the pool that runs blocked matrix products. OpenBLAS itself is kept
single-threaded inside :func:`matmul`: its multi-threaded sgemm changes the
summation order of long reductions with the thread count. Every kernel
partitions work over output elements only and :func:`matmul` uses fixed
block boundaries, so results do not depend on the thread count.
"""

import contextlib
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from threadpoolctl import ThreadpoolController

# output columns per block; fixed so the partition never depends on threads
MATMUL_BLOCK = 512

_controller = None
_pools = {}


def num_threads():
    value = os.environ.get("DKN_THREADS")
    if not value:
        return 1
    try:
        n = int(value)
    except ValueError:
        return 1
    return max(1, n)


def _blas():
    global _controller
    if _controller is None:
        _controller = ThreadpoolController()
    return _controller


@contextlib.contextmanager
def thread_limits(n=None):
    """Pin BLAS to one thread for the block; yields the ``DKN_THREADS`` count."""
    n = num_threads() if n is None else n
    with _blas().limit(limits=1, user_api="blas"):
        yield n


def _pool(n):
    if n not in _pools:
        _pools[n] = ThreadPoolExecutor(max_workers=n, thread_name_prefix="dkn-gemm")
    return _pools[n]


def matmul(a, b, threads=None):
    """``a @ b`` for 2-D arrays, bit-identical for any thread count."""
    n = num_threads() if threads is None else threads
    cols = b.shape[1]
    starts = range(0, cols, MATMUL_BLOCK)
    with _blas().limit(limits=1, user_api="blas"):
        if cols <= MATMUL_BLOCK:
            return a @ b
        out = np.empty((a.shape[0], cols), dtype=np.result_type(a, b))

        def block(j):
            out[:, j:j + MATMUL_BLOCK] = a @ b[:, j:j + MATMUL_BLOCK]

        if n == 1:
            for j in starts:
                block(j)
        else:
            list(_pool(n).map(block, starts))
    return out
