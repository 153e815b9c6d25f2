"""Worker-count configuration shared by the gemm pool and the numba kernels."""

from __future__ import annotations

import os
import threading

import numba

# omp is the only layer available here that tolerates concurrent launches
# from several Python threads.
numba.config.THREADING_LAYER = os.environ.get("NUMBA_THREADING_LAYER", "omp")

_lock = threading.Lock()
_workers: int | None = None


def _default_workers() -> int:
    env = os.environ.get("SRU_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ValueError(f"SRU_WORKERS must be a positive integer, got {env!r}") from exc
        if n < 1:
            raise ValueError(f"SRU_WORKERS must be a positive integer, got {env!r}")
        return n
    return os.cpu_count() or 1


def get_workers() -> int:
    global _workers
    with _lock:
        if _workers is None:
            _workers = _default_workers()
        return _workers


def set_workers(n: int) -> int:
    """Cap parallel workers for gemm tiles and fused lane kernels.

    Returns the effective count; numba cannot exceed ``NUMBA_NUM_THREADS``
    which is fixed at import time, so the request is clipped to it.
    """
    global _workers
    if n < 1:
        raise ValueError(f"worker count must be >= 1, got {n}")
    n = min(int(n), numba.config.NUMBA_NUM_THREADS)
    with _lock:
        _workers = n
    return n


def numba_threads() -> int:
    return min(get_workers(), numba.config.NUMBA_NUM_THREADS)
