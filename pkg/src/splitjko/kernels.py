"""Kernel selection: compiled extension when built, numpy fallback otherwise.

Set ``SPLITJKO_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
softmin_rows = _kernels_py.softmin_rows
quantile_l2 = _kernels_py.quantile_l2

if not os.environ.get("SPLITJKO_PURE_PYTHON"):
    try:
        from . import _kernels
    except ImportError:  # extension not built
        pass
    else:
        softmin_rows = _kernels.softmin_rows
        quantile_l2 = _kernels.quantile_l2
        BACKEND = "compiled"
