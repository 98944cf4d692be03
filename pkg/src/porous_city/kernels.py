"""Backend selection for the hot loops.

The compiled extension is preferred; set ``POROUS_CITY_PURE=1`` to force the
numpy fallback (used by the benchmark and the backend-parity tests).
"""
from __future__ import annotations

import importlib
import os

from . import _kernels_py


def load_backend(pure: bool | None = None):
    if pure is None:
        pure = os.environ.get("POROUS_CITY_PURE", "") not in ("", "0")
    if pure:
        return _kernels_py
    try:
        return importlib.import_module("porous_city._kernels")
    except ImportError:
        return _kernels_py


_backend = load_backend()

BACKEND = _backend.BACKEND
csr_matvec = _backend.csr_matvec
scatter_add = _backend.scatter_add
pcg = _backend.pcg
bicgstab = _backend.bicgstab
