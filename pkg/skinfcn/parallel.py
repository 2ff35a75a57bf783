"""
Intra-op worker pool.

Kernels split their work per batch sample; each sample is computed by one
worker with a fixed arithmetic order, so results do not depend on the
worker count.
"""

import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

from skinfcn.errors import ParameterError

_LOGGER = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

_num_threads = max(1, int(os.getenv("SKINFCN_THREADS", "1")))
_executor: ThreadPoolExecutor | None = None
_executor_lock = threading.Lock()


def set_num_threads(count: int) -> None:
    global _num_threads, _executor
    if count < 1:
        raise ParameterError(f"thread count must be >= 1, got {count}")
    with _executor_lock:
        if _executor is not None and count != _num_threads:
            _executor.shutdown(wait=True)
            _executor = None
        _num_threads = count
    _LOGGER.debug(f"Using {count} worker thread(s)")


def get_num_threads() -> int:
    return _num_threads


def _get_executor() -> ThreadPoolExecutor:
    global _executor
    with _executor_lock:
        if _executor is None:
            _executor = ThreadPoolExecutor(max_workers=_num_threads, thread_name_prefix="skinfcn")
        return _executor


def parallel_map(fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
    """Apply `fn` to every item, preserving order."""
    if _num_threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    return list(_get_executor().map(fn, items))
