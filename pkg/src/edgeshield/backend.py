"""Kernel backend selection.

The conv/pool hot kernels exist twice: a compiled Cython extension
(``edgeshield._kernels``) and a NumPy fallback (``edgeshield._kernels_py``).
The extension is preferred when it imports cleanly; otherwise the fallback is
used. ``EDGESHIELD_BACKEND`` overrides the choice:

* ``auto`` (default) — extension if built, else fallback
* ``ext``            — require the extension, raise if missing
* ``python``         — force the NumPy fallback

Both backends are deterministic run-to-run; they agree with each other to
floating-point round-off (accumulation order differs).
"""

import os

from edgeshield import _kernels_py

try:
    from edgeshield import _kernels as _kernels_ext
except ImportError:
    _kernels_ext = None

_BACKENDS = {"python": _kernels_py}
if _kernels_ext is not None:
    _BACKENDS["ext"] = _kernels_ext


class BackendError(RuntimeError):
    pass


def available_backends():
    return sorted(_BACKENDS)


def _resolve(name):
    if name == "auto":
        name = "ext" if _kernels_ext is not None else "python"
    if name not in _BACKENDS:
        if name == "ext":
            raise BackendError("compiled kernel extension is not built")
        raise BackendError(f"unknown backend {name!r}; expected auto, ext or python")
    return name


_active_name = _resolve(os.environ.get("EDGESHIELD_BACKEND", "auto"))
kernels = _BACKENDS[_active_name]


def active_backend():
    return _active_name


def use_backend(name):
    """Switch the active kernel backend (used by tests and the benchmark)."""
    global _active_name, kernels
    _active_name = _resolve(name)
    kernels = _BACKENDS[_active_name]
    return kernels


def get_kernels(name=None):
    if name is None:
        return kernels
    return _BACKENDS[_resolve(name)]
