"""Hot loops with a compiled backend and a pure-Python fallback.

The compiled module ``_native`` (Cython) is used when it imported cleanly;
otherwise the numpy versions in ``_fallback`` are used. Both expose the same
functions and produce the same results to floating-point rounding.
"""
from __future__ import annotations

import numpy as np

from . import _fallback

try:
    from . import _native
except ImportError:  # extension not built
    _native = None

BACKENDS = ("native", "python") if _native is not None else ("python",)
_active = _native if _native is not None else _fallback


def backend() -> str:
    return "native" if _active is _native else "python"


def use_backend(name: str) -> None:
    """Select ``"native"`` or ``"python"`` for subsequent kernel calls."""
    global _active
    if name == "native":
        if _native is None:
            raise RuntimeError("compiled kernels are not available; build the extension first")
        _active = _native
    elif name == "python":
        _active = _fallback
    else:
        raise ValueError(f"unknown backend {name!r}")


def get(name: str):
    mod = {"native": _native, "python": _fallback}[name]
    if mod is None:
        raise RuntimeError("compiled kernels are not available")
    return mod


def ctc_forward_backward(log_probs: np.ndarray, target, blank: int) -> tuple[float, np.ndarray]:
    lp = np.ascontiguousarray(log_probs, dtype=np.float64)
    tgt = np.ascontiguousarray(target, dtype=np.int64)
    loss, grad = _active.ctc_forward_backward(lp, tgt, int(blank))
    return float(loss), grad


def edit_distance(ref, hyp) -> tuple[int, int, int, int]:
    return _active.edit_distance(np.ascontiguousarray(ref, dtype=np.int64), np.ascontiguousarray(hyp, dtype=np.int64))
