import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "ION_CAVITY_THREADS"


def resolve_threads(threads: Optional[int] = None) -> int:
    """0 means one worker per CPU; None falls back to ION_CAVITY_THREADS, then 1."""
    if threads is None:
        try:
            threads = int(os.getenv(THREADS_ENV, "1"))
        except ValueError:
            logging.warning(f"[worker] Ignoring non-integer {THREADS_ENV}={os.getenv(THREADS_ENV)!r}")
            threads = 1
    if threads < 0:
        raise ValueError(f"threads must be >= 0, got {threads}")
    if threads == 0:
        return os.cpu_count() or 1
    return threads


def run_grid(func: Callable[[T], R], tasks: Sequence[T], threads: Optional[int] = 1, label: str = "grid") -> List[R]:
    """Evaluate ``func`` on every task and return results in task order.

    ``func`` must be a module-level function and every task picklable when
    more than one worker is used. Results never depend on the worker count.
    """
    workers = min(resolve_threads(threads), max(len(tasks), 1))
    started = time.perf_counter()
    logging.debug(f"[worker] {label}: {len(tasks)} task(s) on {workers} worker(s)")
    if workers <= 1:
        results = [func(task) for task in tasks]
    else:
        chunk = max(1, len(tasks) // (4 * workers))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(func, tasks, chunksize=chunk))
    logging.debug(f"[worker] {label}: done in {time.perf_counter() - started:.2f}s")
    return results
