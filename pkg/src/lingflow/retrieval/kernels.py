"""Backend selection for the MaxSim kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``LINGFLOW_PURE_PYTHON=1`` to force the fallback.

Whole-index scoring always goes through the numpy path: one matrix product
per page chunk hands the work to BLAS, which outran the compiled loop at
every size in ``benchmarks/bench_maxsim.py``. The compiled kernel wins on
single (query, page) pairs, where numpy's per-call overhead dominates.
"""

import os

from lingflow.retrieval import _maxsim_py as python_backend

compiled_backend = None
if not os.environ.get("LINGFLOW_PURE_PYTHON"):
    try:
        from lingflow.retrieval import _maxsim as compiled_backend
    except ImportError:
        compiled_backend = None

if compiled_backend is not None:
    BACKEND = "cython"
    maxsim = compiled_backend.maxsim
else:
    BACKEND = "python"
    maxsim = python_backend.maxsim

maxsim_packed = python_backend.maxsim_packed
