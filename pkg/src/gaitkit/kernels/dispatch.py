"""Backend selection for the hot kernels.

Every hot kernel in this package ships two implementations: a numba @njit
version and a pure-numpy version. `GAITKIT_BACKEND` picks one:

    auto   (default) numba for geometry kernels (raycast, scatter, cluster),
           numpy for convolutions -- im2col feeding BLAS sgemm beats njit
           loops at every width we benchmarked (see benchmarks/bench_kernels.py)
    numba  force the @njit path everywhere (warns and falls back if numba
           is not importable)
    numpy  force pure numpy everywhere
"""

import os
import warnings

try:
    import numba  # noqa: F401
    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

_warned = False


def backend_mode():
    mode = os.environ.get("GAITKIT_BACKEND", "auto").lower()
    if mode not in ("auto", "numba", "numpy"):
        raise ValueError(f"GAITKIT_BACKEND must be auto|numba|numpy, got {mode!r}")
    return mode


# direct njit convolution beats im2col+BLAS while the GEMM inner dimension
# (cin*k*k) stays small; crossover measured by benchmarks/bench_kernels.py
CONV_NUMBA_MAX_K = 320


def use_numba(kind, inner_dim=None):
    """Decide the path for one kernel call. kind is 'conv' or 'geom';
    inner_dim carries cin*k*k for convolutions."""
    global _warned
    mode = backend_mode()
    if mode == "numpy":
        return False
    if not HAS_NUMBA:
        if mode == "numba" and not _warned:
            warnings.warn("GAITKIT_BACKEND=numba but numba is not installed; "
                          "using numpy fallbacks")
            _warned = True
        return False
    if mode == "numba":
        return True
    if kind == "geom":
        return True
    return inner_dim is not None and inner_dim <= CONV_NUMBA_MAX_K
