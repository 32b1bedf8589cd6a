"""Process-level runtime knobs: thread caps and allocator tuning."""

from __future__ import annotations

import ctypes
import os

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")


def apply_thread_cap(env=os.environ):
    """Honor SEMRAY_THREADS by capping the BLAS/OpenMP pools.

    Must run before numpy is imported to take effect; a no-op otherwise.
    """
    cap = env.get("SEMRAY_THREADS")
    if not cap:
        return None
    for var in _THREAD_VARS:
        env.setdefault(var, cap)
    return int(cap)


def tune_allocator():
    """Keep freed graph memory in the malloc arena for reuse (best effort).

    The tape allocates and frees the whole activation graph every step;
    without this, glibc serves those blocks by mmap and every step pays
    fresh page faults.  Silently does nothing off glibc.
    """
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)   # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)   # M_TRIM_THRESHOLD
        return True
    except OSError:
        return False
