"""Kernel backend selection.

The compiled Cython kernels are used when the extension was built, unless
``CONDUCTOR_PURE_PYTHON`` is set to a non-empty value other than ``0``. The
numpy fallback is always importable as :data:`reference`.
"""

import os

from . import _kernels_py as reference

_force_pure = os.environ.get("CONDUCTOR_PURE_PYTHON", "") not in ("", "0")

compiled = None
if not _force_pure:
    try:
        from . import _ckernels as compiled
    except ImportError:
        compiled = None

_impl = compiled if compiled is not None else reference

BACKEND = "cython" if compiled is not None else "numpy"

layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd

__all__ = [
    "BACKEND",
    "compiled",
    "reference",
    "layernorm_fwd",
    "layernorm_bwd",
    "softmax_fwd",
    "softmax_bwd",
    "gelu_fwd",
    "gelu_bwd",
]
