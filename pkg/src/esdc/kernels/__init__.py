"""Hot inner loops with a compiled backend and a pure-Python fallback.

The compiled module is used when it imports; set ``ESDC_PURE_PYTHON=1`` to
force the fallback.  ``BACKEND`` names the active implementation and
:func:`use_backend` switches it at runtime (used by tests and benchmarks).
"""

import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # pragma: no cover - depends on the build
    _ckernels = None

_FUNCS = ("moments_update", "label3d", "gapfill_rows")

BACKEND = "python"


def available_backends():
    return ["cython", "python"] if _ckernels is not None else ["python"]


def use_backend(name):
    """Select ``"cython"`` or ``"python"`` kernels for subsequent calls."""
    global BACKEND
    if name == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built")
        mod = _ckernels
    elif name == "python":
        mod = _pykernels
    else:
        raise ValueError(f"unknown backend {name!r}")
    g = globals()
    for f in _FUNCS:
        g[f] = getattr(mod, f)
    BACKEND = name


use_backend("python" if _ckernels is None or os.environ.get("ESDC_PURE_PYTHON") else "cython")
