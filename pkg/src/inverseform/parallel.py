"""Ordered parallel map used for evaluation and benchmarking."""

import os
from concurrent.futures import ThreadPoolExecutor


def default_threads():
    try:
        return max(1, int(os.environ.get("IF_THREADS", "1")))
    except ValueError:
        return 1


def ordered_map(fn, items, threads=None):
    """``[fn(x) for x in items]``, optionally on a thread pool; result order is input order."""
    threads = default_threads() if threads is None else threads
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
