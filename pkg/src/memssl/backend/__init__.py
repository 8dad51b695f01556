"""Kernel backend selection.

The hot kernels exist twice: a Cython extension (``_ckernels``) and the
numpy fallback (``pykernels``). The compiled one is used when importable;
set ``MEMSSL_BACKEND=python`` or ``compiled`` to force a choice. Results
agree between backends to float tolerance, and every run is deterministic
within one backend; bitwise reproducibility claims hold per backend.
"""

from __future__ import annotations

import os

from . import pykernels

try:
    from . import _ckernels
except ImportError:
    _ckernels = None

_KERNELS = (
    "gelu_fwd",
    "gelu_bwd",
    "softmax_fwd",
    "softmax_bwd",
    "log_softmax_fwd",
    "log_softmax_bwd",
    "layer_norm_fwd",
    "layer_norm_bwd",
    "adamw_update",
    "bilinear_resize",
)

_impl = pykernels
_name = "python"


def available_backends() -> tuple[str, ...]:
    return ("python", "compiled") if _ckernels is not None else ("python",)


def use_backend(name: str) -> None:
    """Select the active kernel implementation ('python' or 'compiled')."""
    global _impl, _name
    if name == "python":
        _impl, _name = pykernels, "python"
    elif name == "compiled":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built; reinstall with the extension")
        _impl, _name = _ckernels, "compiled"
    else:
        raise ValueError(f"unknown backend {name!r} (expected 'python' or 'compiled')")


def active_backend() -> str:
    return _name


def __getattr__(attr: str):
    if attr in _KERNELS:
        return getattr(_impl, attr)
    raise AttributeError(f"module {__name__!r} has no attribute {attr!r}")


_requested = os.environ.get("MEMSSL_BACKEND", "auto").lower()
if _requested == "auto":
    use_backend("compiled" if _ckernels is not None else "python")
else:
    use_backend(_requested)
