"""Deterministic worker pool.

Work is split into tasks whose content never depends on the worker
count; results are merged in task order with a fixed pairwise tree, so
a run with ZVLAB_THREADS=1 and ZVLAB_THREADS=8 produces byte-identical
numbers.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def n_workers() -> int:
    env = os.environ.get("ZVLAB_THREADS")
    if env:
        try:
            k = int(env)
        except ValueError:
            raise SystemExit(f"ZVLAB_THREADS must be an integer, got {env!r}")
        if k < 1:
            raise SystemExit("ZVLAB_THREADS must be >= 1")
        return k
    return min(8, os.cpu_count() or 1)


def run_tasks(fn, args_list, workers: int | None = None) -> list:
    """Apply fn to each args tuple; results returned in task order."""
    w = workers if workers is not None else n_workers()
    if w <= 1 or len(args_list) <= 1:
        return [fn(*a) for a in args_list]
    with ThreadPoolExecutor(max_workers=w) as pool:
        futs = [pool.submit(fn, *a) for a in args_list]
        return [f.result() for f in futs]


def tree_reduce(items, combine):
    """Pairwise reduction in fixed order; independent of how items were produced."""
    items = list(items)
    if not items:
        raise ValueError("tree_reduce of empty sequence")
    while len(items) > 1:
        nxt = []
        for i in range(0, len(items) - 1, 2):
            nxt.append(combine(items[i], items[i + 1]))
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]
