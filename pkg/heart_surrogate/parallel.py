from __future__ import annotations

import logging
import os
from concurrent.futures import Executor, ProcessPoolExecutor
from typing import Callable, Iterable, Optional, Sequence, TypeVar

from heart_surrogate.errors import ConfigurationError

logger = logging.getLogger(__name__)

ItemT = TypeVar('ItemT')
ResultT = TypeVar('ResultT')


def default_workers() -> int:
    return os.cpu_count() or 1


class WorkerPool:
    """
    Ordered map over a process pool.

    Results come back in input order whatever the worker count, so reductions over them are
    reproducible. With a single worker everything runs in-process.
    """

    def __init__(self, workers: Optional[int] = None):
        workers = default_workers() if workers is None else workers
        if workers < 1:
            raise ConfigurationError(f'Worker count must be >= 1, got {workers}')
        self.workers = workers
        self._executor: Optional[Executor] = None

    def __enter__(self) -> WorkerPool:
        if self.workers > 1:
            self._executor = ProcessPoolExecutor(max_workers=self.workers)
            logger.debug('Started %d worker processes', self.workers)
        return self

    def __exit__(self, *exc_info: object) -> None:
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def map(self, fn: Callable[[ItemT], ResultT], items: Iterable[ItemT]) -> list[ResultT]:
        items = list(items)
        if self._executor is None or len(items) < 2:
            return [fn(item) for item in items]
        return list(self._executor.map(fn, items))


SERIAL = WorkerPool(1)


def chunks(items: Sequence[ItemT], size: int) -> list[Sequence[ItemT]]:
    """Fixed-size consecutive slices; the boundaries never depend on the worker count."""
    if size < 1:
        raise ConfigurationError(f'Chunk size must be >= 1, got {size}')
    return [items[i : i + size] for i in range(0, len(items), size)]
