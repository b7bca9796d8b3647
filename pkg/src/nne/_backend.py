"""Kernel backend selection: compiled extension if built, numpy otherwise.

Set ``NNE_BACKEND=python`` or ``NNE_BACKEND=compiled`` to force a backend;
forcing ``compiled`` without the built extension is an error rather than a
silent downgrade.
"""

from __future__ import annotations

import os

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built on this install
    _compiled = None

from . import _kernels_py as _python


def kernels():
    forced = os.environ.get("NNE_BACKEND")
    if forced == "python":
        return _python
    if forced == "compiled":
        if _compiled is None:
            raise RuntimeError(
                "NNE_BACKEND=compiled but the extension is not built; "
                "reinstall with a C toolchain or unset NNE_BACKEND"
            )
        return _compiled
    if forced not in (None, ""):
        raise ValueError(f"unknown NNE_BACKEND value: {forced!r}")
    return _compiled if _compiled is not None else _python


def backend_name() -> str:
    return "compiled" if kernels() is _compiled else "python"
