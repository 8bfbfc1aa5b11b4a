"""Backend selection for the segment kernels.

The compiled extension is used when it imports; set ``IAGNN_PURE_PYTHON=1``
to force the numpy fallback.  ``segment_max`` and ``segment_softmax`` stay on
numpy even when compiled: its vectorised ``maximum.at`` and ``exp`` beat the
scalar loops (see ``benchmarks/bench_kernels.py``).
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("IAGNN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py

scatter_add_rows = _impl.scatter_add_rows
scatter_add_rows_into = _impl.scatter_add_rows_into
segment_softmax_backward = _impl.segment_softmax_backward
segment_max = _kernels_py.segment_max
segment_softmax = _kernels_py.segment_softmax

__all__ = [
    "BACKEND",
    "scatter_add_rows",
    "scatter_add_rows_into",
    "segment_max",
    "segment_softmax",
    "segment_softmax_backward",
]
