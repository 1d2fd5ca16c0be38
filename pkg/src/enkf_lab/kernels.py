"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise, or when the
environment variable ``ENKF_LAB_PURE_PYTHON`` is set to a non-empty value
other than ``0``, the NumPy fallback is used. ``BACKEND`` names the choice.
"""

import os

from . import _kernels_py

_force_py = os.environ.get("ENKF_LAB_PURE_PYTHON", "") not in ("", "0")

if _force_py:
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

gaussian_mixture_density = _impl.gaussian_mixture_density
cic_deposit = _impl.cic_deposit

__all__ = ["BACKEND", "gaussian_mixture_density", "cic_deposit"]
