"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is picked once, at first use, from the ABLE_KERNELS env var:

    ABLE_KERNELS=auto    use numba if importable, else numpy (default)
    ABLE_KERNELS=numba   require numba, raise if unavailable
    ABLE_KERNELS=numpy   force the pure-numpy reference path

Matrix products inside the model go through BLAS regardless; this
switch only covers the loop-heavy kernels below.
"""

import os

from ..errors import ConfigError
from . import numpy_impl

_KERNEL_FNS = (
    "conic_moments",
    "ipe_features",
    "ipe_grad_mu",
    "sample_pdf",
    "composite_rays",
    "eval_scene",
)

_impl = None
_backend_name = None


def _select():
    global _impl, _backend_name
    if _impl is not None:
        return _impl
    mode = os.environ.get("ABLE_KERNELS", "auto").strip().lower()
    if mode not in ("auto", "numba", "numpy"):
        raise ConfigError(
            f"ABLE_KERNELS must be one of auto/numba/numpy, got {mode!r}")
    if mode == "numpy":
        _impl, _backend_name = numpy_impl, "numpy"
        return _impl
    try:
        from . import numba_impl
        _impl, _backend_name = numba_impl, "numba"
    except ImportError:
        if mode == "numba":
            raise ConfigError("ABLE_KERNELS=numba but numba is not importable")
        _impl, _backend_name = numpy_impl, "numpy"
    return _impl


def backend():
    """Name of the active backend ("numba" or "numpy")."""
    _select()
    return _backend_name


def get_impl(name=None):
    """Return the active kernel module, or a specific backend by name.

    Passing name="numpy" or name="numba" bypasses the env selection;
    used by the parity tests and the benchmark.
    """
    if name is None:
        return _select()
    if name == "numpy":
        return numpy_impl
    if name == "numba":
        from . import numba_impl
        return numba_impl
    raise ConfigError(f"unknown kernel backend {name!r}")


def __getattr__(attr):
    if attr in _KERNEL_FNS:
        return getattr(_select(), attr)
    raise AttributeError(attr)
