"""Estimation of ICE-free (hypothetical) treatment effects in longitudinal
randomized trials, plus a calibrated synthetic-trial simulator for validation.
"""

import os

# the workloads here are many small matrix factorizations plus process-level
# parallelism; threaded BLAS only adds contention
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
try:
    from threadpoolctl import threadpool_limits as _threadpool_limits

    _blas_limiter = _threadpool_limits(limits=1)
except ImportError:  # pragma: no cover - environment without threadpoolctl
    _blas_limiter = None

__version__ = "0.1.0"
