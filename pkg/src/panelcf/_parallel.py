"""Deterministic task mapping, optionally across processes.

Tasks are pure functions of their index (plus pickled arguments); results are
collected in index order, so the reduction is identical for any worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def resolve_threads(threads: int | None) -> int:
    if threads is not None and threads >= 1:
        return int(threads)
    env = os.environ.get("PANELCF_THREADS", "")
    if env.strip():
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def parallel_map(fn, args_list, threads: int | None = None) -> list:
    """Apply ``fn`` over ``args_list`` (each item a tuple), results in order."""
    threads = resolve_threads(threads)
    if threads <= 1 or len(args_list) <= 1:
        return [fn(*args) for args in args_list]
    chunk = max(1, len(args_list) // (4 * threads))
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_star_apply, [(fn, a) for a in args_list], chunksize=chunk))


def _star_apply(packed):
    fn, args = packed
    return fn(*args)
