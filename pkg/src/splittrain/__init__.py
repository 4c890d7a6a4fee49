"""Split training: background-bias-resistant CNN training with attention diagnostics."""

import os

# SPLITTRAIN_THREADS caps BLAS parallelism (1 = fully deterministic mode).
# Must be exported before numpy first loads its BLAS backend, so this module
# sets the knobs eagerly on import.
_threads = os.environ.get("SPLITTRAIN_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
del _threads

__version__ = "0.1.0"

__all__ = ["tensor", "nn", "data", "train", "explain", "cli", "__version__"]
