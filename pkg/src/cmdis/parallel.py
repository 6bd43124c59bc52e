"""Order-preserving parallel map over fixed work blocks."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

BLOCK = 64


def blocks(items, size: int = BLOCK) -> list:
    """Split ``items`` into consecutive blocks whose boundaries do not depend on the worker count."""
    items = list(items)
    return [items[i:i + size] for i in range(0, len(items), size)]


def pmap(fn, jobs, threads: int = 1) -> list:
    """``[fn(j) for j in jobs]``, optionally on a thread pool; output order is always job order."""
    jobs = list(jobs)
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))
