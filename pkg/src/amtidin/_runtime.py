"""Process-level tuning for the numpy training loop."""

import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_MAX = -4
_done = False


def tune_allocator() -> bool:
    """Keep large activation buffers on the glibc heap instead of fresh mmaps.

    Every training step allocates and frees arrays of tens of megabytes; with
    the default thresholds each one is a new mapping that page-faults on first
    touch.  Returns False where glibc's ``mallopt`` is unavailable.
    """
    global _done
    if _done:
        return True
    if not sys.platform.startswith("linux"):
        return False
    name = ctypes.util.find_library("c")
    if name is None:
        return False
    try:
        libc = ctypes.CDLL(name)
        libc.mallopt(_M_MMAP_MAX, 0)
        libc.mallopt(_M_TRIM_THRESHOLD, 2**31 - 1)
    except (OSError, AttributeError):
        return False
    _done = True
    return True
