"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``SINKFLOW_PURE_PYTHON=1`` to force the fallback.
"""

import os

from sinkflow import _kernels_py

if os.environ.get("SINKFLOW_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from sinkflow import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "python" if _impl is _kernels_py else "cython"

# Above this many cost entries numpy's vectorized exp/log beats the compiled
# scalar loop (see benchmarks/bench_kernels.py), so large solves go to numpy.
LARGE_SOLVE = 64 * 64

sqeuclidean = _impl.sqeuclidean


def sinkhorn_log(C, loga, logb, eps, max_iter, tol, check_every, f_init=None, g_init=None):
    impl = _kernels_py if C.shape[0] * C.shape[1] >= LARGE_SOLVE else _impl
    return impl.sinkhorn_log(C, loga, logb, eps, max_iter, tol, check_every, f_init, g_init)


def available_backends():
    """Map backend name to kernel module for every importable backend."""
    found = {"python": _kernels_py}
    try:
        from sinkflow import _kernels

        found["cython"] = _kernels
    except ImportError:
        pass
    return found
