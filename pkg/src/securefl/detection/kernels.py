"""Import-time selection between the compiled and pure-Python kernels.

Set ``SECUREFL_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py as python_impl

compiled_impl = None
if not os.environ.get("SECUREFL_PURE_PYTHON"):
    try:
        from . import _kernels as compiled_impl
    except ImportError:
        compiled_impl = None

impl = compiled_impl if compiled_impl is not None else python_impl
BACKEND = "cython" if impl is compiled_impl else "python"

iou_matrix = impl.iou_matrix
nms = impl.nms
greedy_match = impl.greedy_match
all_point_ap = impl.all_point_ap
