"""Row-chunked parallelism capped by ``MXCODEC_THREADS``.

Workers write disjoint output slices, so results are bit-identical to a
sequential run regardless of the thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

_MIN_ROWS_PER_CHUNK = 256


def thread_count() -> int:
    raw = os.environ.get("MXCODEC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def for_row_chunks(rows: int, work: Callable[[int, int], None], granule: int = 1) -> None:
    """Call ``work(lo, hi)`` over [0, rows) in chunks aligned to ``granule``."""
    threads = thread_count()
    if rows == 0:
        return
    if threads == 1 or rows < 2 * _MIN_ROWS_PER_CHUNK:
        work(0, rows)
        return
    units = -(-rows // granule)
    per = -(-units // threads)
    bounds = [(i * per * granule, min(rows, (i + 1) * per * granule)) for i in range(threads)]
    bounds = [(lo, hi) for lo, hi in bounds if lo < hi]
    with ThreadPoolExecutor(max_workers=len(bounds)) as pool:
        for f in [pool.submit(work, lo, hi) for lo, hi in bounds]:
            f.result()
