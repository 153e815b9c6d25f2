"""Dense arrays, seeded random streams and the tiled matrix multiply.

Tensors are plain ``numpy.ndarray`` objects (row-major, contiguous). For
``(L, B, d)`` sequence tensors the time axis is outermost, so each step is a
single contiguous ``(B, d)`` block.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from srukit._parallel import get_workers
from srukit.exceptions import DimensionError, ParameterError

DEFAULT_DTYPE = np.float64

# Fixed row-tile height. Every output row is produced by exactly one tile
# product whose height never depends on the worker count, so the summation
# order of each entry is the same for 1 or N workers.
GEMM_ROW_TILE = 256

_blas_pinned = False
_pool: ThreadPoolExecutor | None = None
_pool_size = 0


def _pin_blas_threads() -> None:
    # Our tile pool is the only source of parallelism; BLAS stays serial.
    global _blas_pinned
    if _blas_pinned:
        return
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=1, user_api="blas")
    except ImportError:  # pragma: no cover
        pass
    _blas_pinned = True


def _get_pool(n: int) -> ThreadPoolExecutor:
    global _pool, _pool_size
    if _pool is None or _pool_size != n:
        if _pool is not None:
            _pool.shutdown(wait=False)
        _pool = ThreadPoolExecutor(max_workers=n, thread_name_prefix="srukit-gemm")
        _pool_size = n
    return _pool


def gemm(a: np.ndarray, b: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Matrix product ``a @ b`` computed over fixed row tiles.

    ``a`` is ``(m, k)`` and ``b`` is ``(k, n)``; transposed views are accepted
    without copying. Results are bitwise identical for any worker count.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"gemm expects matrices, got shapes {a.shape} and {b.shape}")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise DimensionError(f"gemm inner extents differ: {a.shape} x {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    if out is None:
        out = np.empty((m, n), dtype=dtype)
    elif out.shape != (m, n):
        raise DimensionError(f"gemm output has shape {out.shape}, expected {(m, n)}")
    if m == 0 or n == 0:
        return out
    if k == 0:
        out[...] = 0.0
        return out
    _pin_blas_threads()
    starts = range(0, m, GEMM_ROW_TILE)
    workers = get_workers()

    def tile(i0: int) -> None:
        i1 = min(i0 + GEMM_ROW_TILE, m)
        np.matmul(a[i0:i1], b, out=out[i0:i1])

    if workers == 1 or m <= GEMM_ROW_TILE:
        for i0 in starts:
            tile(i0)
    else:
        list(_get_pool(workers).map(tile, starts))
    return out


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop product used as the reference for :func:`gemm`."""
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    out = np.zeros((m, n), dtype=np.result_type(a.dtype, b.dtype))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += float(a[i, p]) * float(b[p, j])
            out[i, j] = s
    return out


@dataclass(frozen=True)
class SeededRng:
    """Counter-based generator addressed by ``(seed, stream)``.

    Philox is keyed from both numbers, so each parameter tensor can own an
    independent stream and initialization order never matters.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed & (2**64 - 1), self.stream & (2**64 - 1)])
        return np.random.Generator(np.random.Philox(ss))

    def child(self, stream: int) -> "SeededRng":
        return SeededRng(self.seed, stream)


def stream_id(name: str) -> int:
    """Stable 64-bit stream id derived from a parameter name."""
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def uniform_fill(t: np.ndarray, bound: float, rng: SeededRng) -> np.ndarray:
    """Fill ``t`` in place with i.i.d. draws from ``U[-bound, +bound]``."""
    if not bound > 0:
        raise ParameterError(f"uniform bound must be positive, got {bound}")
    t[...] = rng.generator().uniform(-bound, bound, size=t.shape)
    return t


def stable_sigmoid(x):
    """Logistic function without overflow; works on scalars and arrays."""
    if np.ndim(x) == 0:
        x = float(x)
        if x >= 0:
            return 1.0 / (1.0 + math.exp(-x))
        e = math.exp(x)
        return e / (1.0 + e)
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x.dtype, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out
