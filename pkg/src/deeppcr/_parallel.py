"""Row-range scheduling over a thread pool.

numpy releases the GIL inside elementwise loops, so threads give real
overlap for the batched block kernels. Work is split into contiguous row
ranges; each range writes a disjoint slice of the output, so results do not
depend on the number of workers.
"""

import functools
from concurrent.futures import ThreadPoolExecutor


@functools.lru_cache(maxsize=None)
def _pool(workers):
    return ThreadPoolExecutor(max_workers=workers, thread_name_prefix="deeppcr")


def row_ranges(start, stop, workers):
    n = stop - start
    if n <= 0:
        return []
    k = max(1, min(workers, n))
    base, extra = divmod(n, k)
    out = []
    s = start
    for j in range(k):
        e = s + base + (1 if j < extra else 0)
        out.append((s, e))
        s = e
    return out


def for_rows(fn, start, stop, workers=1):
    """Call ``fn(s, e)`` over a partition of ``[start, stop)``.

    Returns once every range is done; this is the barrier between
    reduction steps.
    """
    ranges = row_ranges(start, stop, workers)
    if workers <= 1 or len(ranges) <= 1:
        for s, e in ranges:
            fn(s, e)
        return
    futures = [_pool(workers).submit(fn, s, e) for s, e in ranges]
    for f in futures:
        f.result()


def map_rows(fn, start, stop, workers=1):
    """Like :func:`for_rows` but collects the per-range return values in order."""
    ranges = row_ranges(start, stop, workers)
    if workers <= 1 or len(ranges) <= 1:
        return [fn(s, e) for s, e in ranges]
    futures = [_pool(workers).submit(fn, s, e) for s, e in ranges]
    return [f.result() for f in futures]
