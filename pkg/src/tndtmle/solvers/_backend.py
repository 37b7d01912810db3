"""Kernel backend selection.

The compiled Cython kernel is used when importable; set ``TNDTMLE_BACKEND=python``
to force the numpy fallback.
"""
from __future__ import annotations

import os

from . import _cdkernel_py

try:
    from . import _cdkernel as _compiled
except ImportError:  # extension not built
    _compiled = None

HAVE_COMPILED = _compiled is not None


def get_kernel(name: str | None = None):
    """Return the ``lasso_path`` implementation for backend `name`.

    `name` is ``"compiled"``, ``"python"`` or None (environment default).
    """
    if name is None:
        name = os.environ.get("TNDTMLE_BACKEND", "compiled" if HAVE_COMPILED else "python")
    if name == "compiled":
        if not HAVE_COMPILED:
            raise ImportError("compiled kernel unavailable; rebuild with `pip install -e .`")
        return _compiled.lasso_path
    if name == "python":
        return _cdkernel_py.lasso_path
    raise ValueError(f"unknown backend {name!r}")


BACKEND = os.environ.get("TNDTMLE_BACKEND", "compiled" if HAVE_COMPILED else "python")
