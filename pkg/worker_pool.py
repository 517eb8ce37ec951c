"""Worker Pool Module - keyreg

Slab-parallel execution for per-voxel work. Output voxels are independent,
so jobs are split along axis 0 and results reassembled in slab order; the
result never depends on the worker count.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "KEYREG_THREADS"
MIN_SLAB_ROWS = 1


def default_threads() -> int:
    """Worker count from ``KEYREG_THREADS``, else the CPU count."""
    value = os.getenv(THREADS_ENV)
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            logger.warning("ignoring non-integer %s=%r", THREADS_ENV, value)
    return os.cpu_count() or 1


def slab_bounds(n_rows: int, n_slabs: int) -> List[Tuple[int, int]]:
    """Contiguous [start, stop) row ranges covering ``n_rows``."""
    n_slabs = max(1, min(n_slabs, max(n_rows // MIN_SLAB_ROWS, 1)))
    edges = np.linspace(0, n_rows, n_slabs + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


class WorkerPool:
    """Thread pool with deterministic, order-preserving map semantics."""

    def __init__(self, threads: Optional[int] = None):
        self.threads = default_threads() if threads is None else max(1, int(threads))
        self.jobs_completed = 0

    def map(self, fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
        """``[fn(x) for x in items]``, possibly concurrently; order is preserved."""
        items = list(items)
        if self.threads == 1 or len(items) <= 1:
            results = [fn(x) for x in items]
        else:
            with ThreadPoolExecutor(max_workers=self.threads) as executor:
                results = list(executor.map(fn, items))
        self.jobs_completed += len(items)
        return results

    def map_slabs(self, fn: Callable[[int, int], np.ndarray], n_rows: int) -> np.ndarray:
        """Run ``fn(start, stop)`` over axis-0 slabs and concatenate along axis 0."""
        bounds = slab_bounds(n_rows, self.threads)
        logger.debug("dispatching %d rows as %d slabs on %d threads", n_rows, len(bounds), self.threads)
        parts = self.map(lambda b: fn(*b), bounds)
        return np.concatenate(parts, axis=0)

    def get_pool_status(self) -> Dict[str, Any]:
        return {"threads": self.threads, "jobs_completed": self.jobs_completed}


def resolve_pool(pool: Optional[WorkerPool] = None, threads: Optional[int] = None) -> WorkerPool:
    if pool is not None:
        return pool
    return WorkerPool(threads)


def ordered_argmax(values: Sequence[float]) -> int:
    """Index of the largest value; ties go to the lowest index."""
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best
