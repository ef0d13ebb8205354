"""Process-level tuning the per-frame loop depends on.

The engine allocates and frees a few MB of float64 scratch every frame.
With glibc defaults those buffers are mmap'ed and returned to the OS on
free, so every frame pays page-fault cost; raising the mmap/trim
thresholds keeps them on the heap and makes a gradient step ~4x faster.
"""

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3

_done = False


def enable_fast_allocator(threshold_bytes=256 * 1024 * 1024):
    """Keep large allocations on the heap; no-op on non-glibc platforms."""
    global _done
    if _done:
        return True
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        ok = bool(libc.mallopt(_M_MMAP_THRESHOLD, threshold_bytes))
        ok = bool(libc.mallopt(_M_TRIM_THRESHOLD, threshold_bytes)) and ok
        _done = ok
        return ok
    except (OSError, AttributeError):
        return False
