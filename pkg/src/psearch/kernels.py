"""Loop-heavy kernels: compiled extension when built, numpy fallback otherwise.

Set ``PSEARCH_PURE_PYTHON=1`` to force the fallback.
"""
import os

from psearch import _kernels_py

if os.environ.get("PSEARCH_PURE_PYTHON") == "1":
    _impl = _kernels_py
else:
    try:
        from psearch import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = "cython" if _impl is not _kernels_py else "python"

box_iou = _impl.box_iou
nms = _impl.nms
local_maxima = _impl.local_maxima
peak_stds = _impl.peak_stds
greedy_match = _impl.greedy_match

__all__ = ["BACKEND", "box_iou", "nms", "local_maxima", "peak_stds", "greedy_match"]
