"""Numba switch.

Hot kernels are decorated with :func:`njit` from this module. Setting
``THREADFUZZ_DISABLE_JIT=1`` (or running without numba installed) turns the
decorator into the identity, so the same kernel source runs as plain
Python/numpy. Both paths are bit-for-bit equivalent; kernels only use int64
arithmetic whose wraparound numpy reproduces once overflow warnings are
silenced (see :func:`kernel_errstate`).
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

_FLAG = "THREADFUZZ_DISABLE_JIT"


def _env_disabled() -> bool:
    return os.environ.get(_FLAG, "").strip().lower() not in ("", "0", "false", "no")


try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

JIT_ENABLED = _numba is not None and not _env_disabled()


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` when enabled, identity otherwise."""
    if JIT_ENABLED:
        kwargs.setdefault("cache", True)
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def kernel_errstate():
    """Context for calling kernels: silences numpy int64 overflow in fallback mode."""
    if JIT_ENABLED:
        return contextlib.nullcontext()
    return np.errstate(over="ignore")


def backend_name() -> str:
    return "numba" if JIT_ENABLED else "python"
