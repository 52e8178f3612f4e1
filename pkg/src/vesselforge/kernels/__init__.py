"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it was built and importable; set
``VESSELFORGE_PURE_PYTHON=1`` to force the numpy implementation.
"""

import os
from types import ModuleType

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_NAMES = (
    "im2col",
    "col2im",
    "maxpool_forward",
    "maxpool_backward",
    "avgpool_forward",
    "avgpool_backward",
    "ace_pairwise",
)


def available_backends():
    return ["cython", "python"] if _ckernels is not None else ["python"]


def get_backend(name: str) -> ModuleType:
    if name == "python":
        return _pykernels
    if name == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def _select():
    if os.environ.get("VESSELFORGE_PURE_PYTHON", "") not in ("", "0") or _ckernels is None:
        return "python"
    return "cython"


BACKEND = _select()
_impl = get_backend(BACKEND)

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
avgpool_forward = _impl.avgpool_forward
avgpool_backward = _impl.avgpool_backward
ace_pairwise = _impl.ace_pairwise

__all__ = ["BACKEND", "available_backends", "get_backend", *_NAMES]
