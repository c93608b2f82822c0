"""Process-wide runtime tuning for tape-heavy numpy workloads.

Two knobs, both measured on the reference 2-core box:

* glibc malloc thresholds. A training step keeps dozens of ~100KB-1MB
  intermediate arrays alive until the backward pass, which pushes glibc into
  per-allocation mmap/munmap (every buffer page-faulted in from scratch).
  Raising the mmap and trim thresholds lets freed buffers recycle through the
  heap arena: ~5x faster steps. No-op off glibc.

* BLAS thread count. The model's matrices are small enough that OpenBLAS
  threading overhead exceeds its gains (2 threads measured ~40% slower than
  1), so BLAS pools are pinned to one thread. Override with LTDR_BLAS_THREADS
  (0 leaves the pools alone).
"""

from __future__ import annotations

import ctypes
import os
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3

_malloc_applied = False
_blas_limiter = None  # keeps the threadpoolctl limits alive


def tune_malloc() -> bool:
    """Raise glibc's mmap/trim thresholds. Idempotent; returns success.

    Disable with LTDR_NO_MALLOC_TUNE=1.
    """
    global _malloc_applied
    if _malloc_applied:
        return True
    if os.environ.get("LTDR_NO_MALLOC_TUNE"):
        return False
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6")
        ok = bool(libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30))
        ok = bool(libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30)) and ok
    except OSError:
        return False
    _malloc_applied = ok
    return ok


def limit_blas_threads() -> bool:
    """Pin BLAS thread pools to LTDR_BLAS_THREADS (default 1). Idempotent."""
    global _blas_limiter
    if _blas_limiter is not None:
        return True
    raw = os.environ.get("LTDR_BLAS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 1
    if n <= 0:
        return False
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return False
    _blas_limiter = threadpool_limits(limits=n, user_api="blas")
    return True


def tune_runtime() -> None:
    tune_malloc()
    limit_blas_threads()
