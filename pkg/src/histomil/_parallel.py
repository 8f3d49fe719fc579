from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get("HISTOMIL_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def ordered_map(fn, items, threads: int | None = None) -> list:
    """Map ``fn`` over ``items`` on a thread pool; results keep input order."""
    items = list(items)
    n = worker_count(threads)
    if n == 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
