"""Hot numeric loops behind a backend switch.

The compiled extension is used when it imports; otherwise the NumPy
fallback. Set ``LATENTVSR_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if not os.environ.get("LATENTVSR_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def get_impl(backend=None):
    if backend is None:
        return _impl
    if backend == "python":
        return _kernels_py
    if backend == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {backend!r}")


def warp_abs_diff(prev, nxt, flow, backend=None):
    """Masked bilinear-warp residual for one frame pair; returns (sum, count)."""
    prev = np.ascontiguousarray(prev, dtype=np.float64)
    nxt = np.ascontiguousarray(nxt, dtype=np.float64)
    flow = np.ascontiguousarray(flow, dtype=np.float64)
    return get_impl(backend).warp_abs_diff(prev, nxt, flow)


def blend_rows(a, b, alpha, backend=None):
    """Row-wise convex blend of two (P, K) float32 arrays with weights alpha (P,)."""
    a = np.ascontiguousarray(a, dtype=np.float32)
    b = np.ascontiguousarray(b, dtype=np.float32)
    alpha = np.ascontiguousarray(alpha, dtype=np.float64)
    out = np.empty_like(a)
    return get_impl(backend).blend_rows(a, b, alpha, out)
