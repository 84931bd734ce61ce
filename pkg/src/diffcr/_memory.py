"""Keep freed heap pages mapped between training steps.

Every step allocates and drops the same few hundred MB of activations.
With glibc's defaults large blocks go back to the kernel on free and come
back as fresh page faults on the next step, which can cost more than the
arithmetic. Raising the mmap/trim thresholds lets the heap reuse them.
"""

import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_THRESHOLD = 1 << 30


def retain_freed_memory() -> bool:
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        ok = libc.mallopt(_M_MMAP_THRESHOLD, _THRESHOLD) and libc.mallopt(_M_TRIM_THRESHOLD, _THRESHOLD)
    except (OSError, AttributeError):
        return False
    return bool(ok)
