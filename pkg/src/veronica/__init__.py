"""Trajectory optimisation and adversarially regularised policy learning coupled by ADMM."""

import os as _os

# Pin BLAS/OpenMP pools before numpy loads so reductions are reproducible.
_threads = _os.environ.get("VERONICA_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
