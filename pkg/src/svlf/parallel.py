"""Worker-count handling.

Work is always split into fixed-size chunks whose boundaries do not depend
on the worker count, and results are reduced in chunk order, so output is
bit-identical for any number of threads. BLAS is pinned to one thread while
chunks run so that each matmul is itself deterministic.
"""
from __future__ import annotations

import contextlib
import os
from concurrent.futures import ThreadPoolExecutor

from threadpoolctl import threadpool_limits

ENV_THREADS = "SVLF_THREADS"


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        threads = int(os.environ.get(ENV_THREADS, "1") or 1)
    return max(1, int(threads))


@contextlib.contextmanager
def blas_single_thread():
    with threadpool_limits(limits=1, user_api="blas"):
        yield


def map_ordered(fn, items, threads: int = 1) -> list:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))
