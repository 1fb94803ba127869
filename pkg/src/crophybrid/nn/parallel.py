"""Deterministic sample-chunk parallelism for the convolution kernels.

Work is always cut into the same fixed-size sample chunks whatever the
thread count, and partial reductions are summed in chunk order. Results are
therefore bit-identical for any ``threads`` value.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

from threadpoolctl import threadpool_limits

CHUNK = 16
ENV_VAR = "CROPHYBRID_THREADS"

_threads = 1
_pool: ThreadPoolExecutor | None = None


def default_threads() -> int:
    env = os.environ.get(ENV_VAR)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def set_threads(n: int | None) -> int:
    global _threads, _pool
    # BLAS stays single-threaded: all parallelism comes from the fixed chunks
    threadpool_limits(1, user_api="blas")
    n = default_threads() if n is None else max(1, int(n))
    if n != _threads:
        if _pool is not None:
            _pool.shutdown(wait=True)
            _pool = None
        _threads = n
    return _threads


def get_threads() -> int:
    return _threads


@contextmanager
def threads(n: int):
    prev = _threads
    set_threads(n)
    try:
        yield
    finally:
        set_threads(prev)


def chunks(n: int, size: int = CHUNK) -> list[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def map_chunks(fn, n: int) -> list:
    """Apply ``fn(slice)`` over fixed chunks of ``range(n)``; results in chunk order."""
    global _pool
    parts = chunks(n)
    if _threads == 1 or len(parts) == 1:
        return [fn(s) for s in parts]
    if _pool is None:
        _pool = ThreadPoolExecutor(max_workers=_threads, thread_name_prefix="crophybrid")
    return list(_pool.map(fn, parts))


def ordered_sum(parts: list):
    total = parts[0].copy()
    for p in parts[1:]:
        total += p
    return total
