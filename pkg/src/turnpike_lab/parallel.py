"""Order-preserving map over a process pool."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def default_workers():
    return os.cpu_count() or 1


def pmap(fn, items, workers=1):
    """``list(map(fn, items))``, fanned out to ``workers`` processes when > 1.

    Results come back in input order, so reductions over them do not depend on
    scheduling.
    """
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))
