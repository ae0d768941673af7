"""
Deterministic chunked map
Splits n samples into chunks whose size depends only on the path length,
runs them serially or on a process pool, and stitches results in chunk
order so the output never depends on the worker count.
"""
import logging
from multiprocessing import Pool
from typing import Any, Callable, List, Optional, Tuple

import numpy as np

from fklab import settings

logger = logging.getLogger(__name__)

MAX_CHUNK = 4096
POINTS_PER_CHUNK = 1 << 22


def chunk_size(n_steps: int) -> int:
    """Paths per chunk; bounded so a chunk holds about 4M skeleton points."""
    return max(1, min(MAX_CHUNK, POINTS_PER_CHUNK // (n_steps + 1)))


def chunk_plan(n: int, n_steps: int) -> List[Tuple[int, int]]:
    """(chunk index, sample count) pairs covering n samples."""
    size = chunk_size(n_steps)
    return [(i, min(size, n - start)) for i, start in enumerate(range(0, n, size))]


def _run_chunk(task):
    func, key, count, kwargs = task
    return func(key, count, **kwargs)


def _stitch(parts: List[Any]):
    if isinstance(parts[0], tuple):
        return tuple(np.concatenate([p[j] for p in parts]) for j in range(len(parts[0])))
    return np.concatenate(parts)


def map_chunks(
    func: Callable,
    n: int,
    rng,
    n_steps: int,
    workers: Optional[int] = 1,
    /,
    **kwargs,
):
    """
    Run `func(rng.child("chunk", i), count, **kwargs)` over the chunk plan.

    `func` must be a module-level function returning an array (or a tuple of
    arrays) with one leading row per sample.
    """
    plan = chunk_plan(n, n_steps)
    tasks = [(func, rng.child("chunk", i), count, kwargs) for i, count in plan]
    workers = settings.DEFAULT_WORKERS if workers is None else workers
    if workers <= 1 or len(tasks) == 1:
        parts = [_run_chunk(t) for t in tasks]
    else:
        logger.debug("%s: %d chunks on %d workers", func.__name__, len(tasks), workers)
        with Pool(min(workers, len(tasks))) as pool:
            parts = pool.map(_run_chunk, tasks)
    return _stitch(parts)


def pairwise_mean(values: np.ndarray) -> float:
    """Mean via numpy's pairwise summation over the chunk-ordered array."""
    values = np.ascontiguousarray(values, dtype=float)
    return float(np.sum(values) / len(values))
