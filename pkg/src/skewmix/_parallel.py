"""Row-chunked data parallelism.

Chunk boundaries depend only on the row count, never on the thread count, so
every per-row quantity and every chunk-ordered reduction is bit-identical for
any number of threads.
"""

import os
from concurrent.futures import ThreadPoolExecutor

CHUNK_ROWS = 65536
THREADS_ENV = "SKEWMIX_THREADS"


def default_threads():
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def chunk_slices(n, chunk=CHUNK_ROWS):
    return [slice(i, min(i + chunk, n)) for i in range(0, n, chunk)] or [slice(0, 0)]


def map_chunks(fn, n, threads=None, chunk=CHUNK_ROWS):
    """Apply ``fn(slice)`` to every chunk of ``range(n)``; results in chunk order."""
    slices = chunk_slices(n, chunk)
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(slices) == 1:
        return [fn(s) for s in slices]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, slices))
