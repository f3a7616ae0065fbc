"""Order-preserving worker pool helpers.

The SINKCPD_THREADS environment variable caps parallelism; the default is the
hardware concurrency. Results are always returned in input order, so callers
stay deterministic regardless of scheduling.
"""

import os
from concurrent.futures import ThreadPoolExecutor


def max_workers():
    value = os.environ.get("SINKCPD_THREADS", "").strip()
    if value:
        try:
            parsed = int(value)
        except ValueError:
            parsed = 1
        return max(1, parsed)
    return max(1, os.cpu_count() or 1)


def parallel_map(fn, items, workers=None):
    """Map ``fn`` over ``items``, preserving order.

    Falls back to a plain loop when only one worker is available or there is
    nothing to gain from threads.
    """
    items = list(items)
    if workers is None:
        workers = max_workers()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))
