"""Kernel backend selection.

The message-passing inner loops call four scatter/segment primitives. A
compiled Cython extension provides them when it was built; otherwise the pure
numpy fallback is used. Selection happens once, at import:

    SGREID_KERNELS=auto    prefer the compiled extension, fall back silently
    SGREID_KERNELS=native  require the compiled extension (ImportError if absent)
    SGREID_KERNELS=pure    force the numpy fallback

``BACKEND`` names the backend actually selected.
"""

from __future__ import annotations

import os

from . import pure as _pure

_requested = os.environ.get("SGREID_KERNELS", "auto").strip().lower()
if _requested not in ("auto", "native", "pure"):
    raise ValueError(f"SGREID_KERNELS must be auto, native, or pure, not {_requested!r}")

_impl = None
if _requested in ("auto", "native"):
    try:
        from . import _native as _impl  # type: ignore[attr-defined]
    except ImportError:
        if _requested == "native":
            raise ImportError(
                "SGREID_KERNELS=native but the compiled extension is not available; "
                "reinstall with a C toolchain or use SGREID_KERNELS=pure"
            ) from None
        _impl = None
if _impl is None:
    _impl = _pure

BACKEND: str = "pure" if _impl is _pure else "native"

segment_softmax = _impl.segment_softmax
segment_softmax_backward = _impl.segment_softmax_backward
scatter_rowsum = _impl.scatter_rowsum
scatter_weighted_rowsum = _impl.scatter_weighted_rowsum

__all__ = [
    "BACKEND",
    "segment_softmax",
    "segment_softmax_backward",
    "scatter_rowsum",
    "scatter_weighted_rowsum",
]
