"""Hot-loop kernels: compiled extension when built, NumPy fallback otherwise.

Set ``MEDSTAT_PURE_PYTHON=1`` to force the fallback. Callers reach the kernels
through this module's attributes so :func:`use_backend` takes effect everywhere.
"""

import os
from types import ModuleType

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

KERNEL_NAMES = (
    "highpass_fb",
    "softmax_rows",
    "softmax_rows_backward",
    "layernorm_forward",
    "layernorm_backward",
)

BACKEND = "python"


def available_backends() -> list[str]:
    return ["compiled", "python"] if _compiled is not None else ["python"]


def backend_module(name: str) -> ModuleType:
    if name == "python":
        return _kernels_py
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


def use_backend(name: str) -> None:
    global BACKEND
    mod = backend_module(name)
    for fn in KERNEL_NAMES:
        globals()[fn] = getattr(mod, fn)
    BACKEND = name


use_backend("python" if os.environ.get("MEDSTAT_PURE_PYTHON") or _compiled is None
            else "compiled")
