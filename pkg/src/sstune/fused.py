"""Backend selection for the fused tuning-step kernel.

The compiled extension is used when it imports; otherwise the NumPy version.
Set ``SSTUNE_BACKEND=python`` to force the fallback.
"""
import os

from . import _fused_py

BACKEND = "python"
_impl = _fused_py

if os.environ.get("SSTUNE_BACKEND", "").lower() != "python":
    try:
        from . import _fused as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _fused_py


def available_backends():
    out = {"python": _fused_py}
    try:
        from . import _fused
        out["cython"] = _fused
    except ImportError:
        pass
    return out


loss_and_grad = _impl.loss_and_grad
