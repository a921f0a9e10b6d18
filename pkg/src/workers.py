import logging
from typing import Any, Callable, Iterable, List, Optional

# [Infra] PySide6 Imports
from PySide6.QtCore import QMutex, QRunnable, QThreadPool

from .core import QMutexWithLocker

# ==========================================
# Region: Chunk Workers
# ==========================================
class ChunkTask(QRunnable):
    """Runs fn(item) for one unit of work and stores the result in its slot.

    Exceptions never leave the thread: they are kept on the task and re-raised
    by the pool on the calling thread.
    """

    def __init__(self, fn: Callable[[Any], Any], item: Any, slot: int, pool: "WorkerPool"):
        super().__init__()
        self.setAutoDelete(False)
        self.fn = fn
        self.item = item
        self.slot = slot
        self.pool = pool
        self.error: Optional[BaseException] = None

    def run(self):
        logging.debug(f"[Worker] chunk {self.slot} started")
        try:
            result = self.fn(self.item)
        except Exception as e:
            self.error = e
            logging.debug(f"[Worker] chunk {self.slot} failed: {e}")
            return
        self.pool._store(self.slot, result)
        logging.debug(f"[Worker] chunk {self.slot} finished")


class WorkerPool:
    """Ordered map over independent work units on a QThreadPool.

    threads == 1 runs the units inline on the calling thread. Results always
    come back in item order, so merges are independent of the thread count.
    """

    def __init__(self, threads: int = 1):
        self.threads = max(1, int(threads))
        self._mutex = QMutex()
        self._results: List[Any] = []
        self._pool: Optional[QThreadPool] = None
        if self.threads > 1:
            self._pool = QThreadPool()
            self._pool.setMaxThreadCount(self.threads)

    def _store(self, slot: int, value: Any):
        with QMutexWithLocker(self._mutex):
            self._results[slot] = value

    def map(self, fn: Callable[[Any], Any], items: Iterable[Any]) -> List[Any]:
        items = list(items)
        if self._pool is None or len(items) <= 1:
            return [fn(item) for item in items]

        with QMutexWithLocker(self._mutex):
            self._results = [None] * len(items)
        tasks = [ChunkTask(fn, item, k, self) for k, item in enumerate(items)]
        for task in tasks:
            self._pool.start(task)
        self._pool.waitForDone()

        for task in tasks:
            if task.error is not None:
                logging.error(f"[Worker] chunk {task.slot} raised {type(task.error).__name__}: {task.error}")
                raise task.error
        with QMutexWithLocker(self._mutex):
            results, self._results = self._results, []
        return results
