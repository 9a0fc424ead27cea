"""Kernel backend selection.

The compiled extension (``sphax._kernels_cy``) releases the GIL inside the
hot loops, which is what lets scheduler workers run truly in parallel; the
NumPy module is a drop-in functional fallback.  ``SPHAX_KERNELS`` forces a
choice: ``compiled``/``cy`` or ``python``/``py``.
"""

from __future__ import annotations

import os

from . import _kernels_py


def _select():
    choice = os.environ.get("SPHAX_KERNELS", "auto").lower()
    if choice in ("python", "py"):
        return _kernels_py
    try:
        from . import _kernels_cy
    except ImportError:
        if choice in ("compiled", "cy"):
            raise ImportError(
                "SPHAX_KERNELS requested the compiled backend but "
                "sphax._kernels_cy is not built")
        return _kernels_py
    return _kernels_cy


_active = _select()


def active():
    """The kernel module the engine is running with."""
    return _active


def use(name: str):
    """Force a backend (for tests and the benchmark); returns the module."""
    global _active
    if name in ("python", "py"):
        _active = _kernels_py
    elif name in ("compiled", "cy"):
        from . import _kernels_cy
        _active = _kernels_cy
    else:
        raise ValueError(f"unknown backend {name!r}")
    return _active


def available() -> dict:
    """Importability of each backend, for reporting and the benchmark."""
    out = {"python": True}
    try:
        from . import _kernels_cy  # noqa: F401
        out["compiled"] = True
    except ImportError:
        out["compiled"] = False
    return out
