"""CRF kernel selection.

The compiled ``_kernels`` extension is used when it imports; otherwise the
NumPy versions in ``_kernels_py`` are used. Setting ``DEMONER_PURE_PYTHON=1``
forces the NumPy path.
"""

import os

from . import _kernels_py

if os.environ.get("DEMONER_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _kernels_py

BACKEND = "compiled" if _impl is not _kernels_py else "python"

forward = _impl.forward
backward = _impl.backward
expectations = _impl.expectations
viterbi = _impl.viterbi
