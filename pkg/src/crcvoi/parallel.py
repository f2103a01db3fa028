"""Minimal worker-pool contract: an order-preserving parallel map.

Results are always returned in input order, so reductions done by the caller
are independent of the worker count.
"""

from __future__ import annotations

import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def default_workers() -> int:
    return os.cpu_count() or 1


def pmap(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> list[R]:
    items = list(items)
    if workers is None:
        workers = default_workers()
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    chunksize = max(1, len(items) // (4 * workers))
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(max_workers=min(workers, len(items)), mp_context=ctx) as ex:
        return list(ex.map(fn, items, chunksize=chunksize))


def partition(n: int, parts: int) -> list[tuple[int, int]]:
    """Split ``range(n)`` into at most ``parts`` contiguous half-open ranges."""
    parts = max(1, min(parts, n))
    edges = [n * i // parts for i in range(parts + 1)]
    return [(edges[i], edges[i + 1]) for i in range(parts) if edges[i] < edges[i + 1]]


def chunk_ranges(n: int, workers: int, min_chunk: int = 2000) -> Sequence[tuple[int, int]]:
    if workers <= 1:
        return [(0, n)]
    return partition(n, min(workers, max(1, n // min_chunk)))
