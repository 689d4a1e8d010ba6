"""Hot convolution kernels with import-time backend selection.

The compiled Cython extension is used when present; otherwise the NumPy
fallback takes over. Set SHMROBUST_KERNELS=numpy (or =cython) to force a
backend; forcing cython raises if the extension was not built.
"""

import os

from . import _npkernels

_requested = os.environ.get("SHMROBUST_KERNELS", "auto")
if _requested not in ("auto", "cython", "numpy"):
    raise ValueError(f"SHMROBUST_KERNELS must be auto|cython|numpy, got {_requested!r}")

if _requested in ("auto", "cython"):
    try:
        from . import _ckernels as _impl
    except ImportError:
        if _requested == "cython":
            raise
        _impl = _npkernels
else:
    _impl = _npkernels

BACKEND = _impl.BACKEND
conv1d_forward = _impl.conv1d_forward
conv1d_grad_input = _impl.conv1d_grad_input
conv1d_grad_weight = _impl.conv1d_grad_weight


def backends():
    """Importable backend modules keyed by name (for parity tests and benchmarks)."""
    found = {"numpy": _npkernels}
    try:
        from . import _ckernels
        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
