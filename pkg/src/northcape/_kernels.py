"""Kernel selection: compiled extension when available, pure Python otherwise.

Set ``NORTHCAPE_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

if os.environ.get("NORTHCAPE_PURE_PYTHON"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _speedups as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

pack_token = _impl.pack_token
unpack_token = _impl.unpack_token
ctz64 = _impl.ctz64
Speck64 = _impl.Speck64

__all__ = ["BACKEND", "Speck64", "ctz64", "pack_token", "unpack_token"]
