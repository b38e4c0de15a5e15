"""Process-level tuning for the training loop."""
from __future__ import annotations

import contextlib
import ctypes
import ctypes.util
import functools
import gc
import sys

# glibc mallopt parameters
_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3


@functools.lru_cache(maxsize=1)
def keep_heap_warm() -> bool:
    """Serve the step's short-lived activation buffers from the heap instead
    of fresh mmap regions, so they are not page-faulted in on every step.
    No-op (returns False) outside glibc."""
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        ok = (libc.mallopt(_M_MMAP_THRESHOLD, 32 << 20)
              and libc.mallopt(_M_TRIM_THRESHOLD, 256 << 20)
              and libc.mallopt(_M_TOP_PAD, 64 << 20))
    except (OSError, AttributeError):
        return False
    return bool(ok)


@contextlib.contextmanager
def gc_paused():
    """Suspend the cyclic collector; a training step builds no reference
    cycles, so collection passes there are pure overhead."""
    was = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was:
            gc.enable()
