"""Kernel backend selection.

The compiled ``_ckernels`` module is used when importable; otherwise, or when
``STPREDICT_BACKEND=python`` is set, the numpy kernels are used.
"""
import ctypes
import logging
import os

from . import _npkernels

log = logging.getLogger(__name__)

_BACKENDS = {"python": _npkernels}
try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None
else:
    _BACKENDS["cython"] = _ckernels


def _raise_mmap_threshold():
    # glibc serves allocations above 128 KiB with fresh mmap pages; im2col
    # buffers hit that on every call and pay for the page faults.
    if os.environ.get("STPREDICT_NO_MALLOPT") == "1":
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 256 * 1024 * 1024)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 512 * 1024 * 1024)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_raise_mmap_threshold()


def available():
    return sorted(_BACKENDS)


def _default():
    want = os.environ.get("STPREDICT_BACKEND", "").strip().lower()
    if want:
        if want not in _BACKENDS:
            raise ImportError(f"STPREDICT_BACKEND={want!r} is not available; have {available()}")
        return _BACKENDS[want]
    return _ckernels if _ckernels is not None else _npkernels


kernels = _default()
log.debug("stpredict kernels: %s", kernels.NAME)


def use(name):
    """Switch the active kernel backend (``"cython"`` or ``"python"``)."""
    global kernels
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; have {available()}")
    kernels = _BACKENDS[name]
    return kernels
