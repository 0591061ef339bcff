"""Kernel backend selection.

The compiled extension (_fastcore) is preferred; the numpy implementation
(_purecore) is the drop-in fallback. Set ALIGNLAB_BACKEND=pure|fast to force
one (forcing "fast" raises if the extension is missing).
"""
from __future__ import annotations

import os

from . import _purecore

_forced = os.environ.get("ALIGNLAB_BACKEND", "").strip().lower()

if _forced == "pure":
    kernels = _purecore
else:
    try:
        from . import _fastcore as kernels  # type: ignore[no-redef]
    except ImportError:
        if _forced == "fast":
            raise
        kernels = _purecore

BACKEND_NAME: str = kernels.NAME


def get_backend(name: str | None = None):
    """Return a kernel module by name; None gives the import-time choice."""
    if name is None:
        return kernels
    if name == "pure":
        return _purecore
    if name == "fast":
        from . import _fastcore
        return _fastcore
    raise ValueError(f"unknown backend {name!r}")
