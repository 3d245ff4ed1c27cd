"""Hot numeric kernels with a compiled backend and a pure-Python fallback.

The compiled module is used when it imports; set ``LIGHTMESH_PURE_PYTHON=1``
to force the fallback. Both backends return identical values.
"""
import os

from . import _pykernels as python_backend

compiled_backend = None
if not os.environ.get("LIGHTMESH_PURE_PYTHON"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:
        compiled_backend = None

_active = compiled_backend or python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

splitmix64 = _active.splitmix64
hash4 = _active.hash4
hash_uniform = _active.hash_uniform
hash_normal = _active.hash_normal
airtime_ms = _active.airtime_ms
path_loss_db = _active.path_loss_db
path_loss_matrix = _active.path_loss_matrix
max_window_airtime = _active.max_window_airtime

__all__ = [
    "BACKEND",
    "airtime_ms",
    "hash4",
    "hash_normal",
    "hash_uniform",
    "max_window_airtime",
    "path_loss_db",
    "path_loss_matrix",
    "splitmix64",
]
