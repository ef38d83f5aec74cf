"""Bounded FIFO task queue with a never-blocking enqueue and a blocking dequeue."""

from __future__ import annotations

import enum
import threading
from collections import deque
from typing import Callable, Hashable

from .state import Task


class EnqueueResult(str, enum.Enum):
    ACCEPTED = "accepted"
    QUEUE_FULL = "queue_full"
    DUPLICATE = "duplicate"


class QueueClosed(Exception):
    """The queue has been closed for shutdown."""


class TaskQueue:
    """Multi-producer/multi-consumer FIFO of at most ``capacity`` tasks.

    Hooks run while the queue's internal lock is held, which lets the owner
    mirror queue depth into shared state without a window where the two
    disagree. Hooks must not call back into the queue.
    """

    def __init__(
        self,
        capacity: int = 128,
        on_accept: Callable[[Task], None] | None = None,
        on_reject: Callable[[Task], None] | None = None,
        on_dequeue: Callable[[Task, int], None] | None = None,
        on_discard: Callable[[list[Task]], None] | None = None,
    ) -> None:
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque[Task] = deque()
        self._cond = threading.Condition(threading.Lock())
        self._closed = False
        self.on_accept = on_accept
        self.on_reject = on_reject
        self.on_dequeue = on_dequeue
        self.on_discard = on_discard

    def enqueue(self, task: Task, dedupe_key: Callable[[Task], Hashable] | None = None) -> EnqueueResult:
        """Append ``task`` unless the queue is full. Raises QueueClosed after close().

        With ``dedupe_key``, a task whose key matches one already queued is
        dropped and DUPLICATE returned.
        """
        with self._cond:
            if self._closed:
                raise QueueClosed()
            if dedupe_key is not None:
                key = dedupe_key(task)
                if any(dedupe_key(t) == key for t in self._items):
                    return EnqueueResult.DUPLICATE
            if len(self._items) >= self.capacity:
                if self.on_reject:
                    self.on_reject(task)
                return EnqueueResult.QUEUE_FULL
            if self.on_accept:
                self.on_accept(task)
            self._items.append(task)
            self._cond.notify()
            return EnqueueResult.ACCEPTED

    def dequeue_blocking(self, worker_id: int, timeout: float | None = None) -> Task:
        """Return the head task, waiting while the queue is empty and open.

        Raises QueueClosed once the queue is closed and drained, and
        TimeoutError if ``timeout`` elapses first.
        """
        with self._cond:
            if not self._cond.wait_for(lambda: self._items or self._closed, timeout):
                raise TimeoutError("no task available")
            if not self._items:
                raise QueueClosed()
            task = self._items.popleft()
            if self.on_dequeue:
                self.on_dequeue(task, worker_id)
            return task

    def size(self) -> int:
        with self._cond:
            return len(self._items)

    def pending(self) -> list[Task]:
        with self._cond:
            return list(self._items)

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed

    def discard_pending(self) -> list[Task]:
        """Remove and return every queued task (non-draining shutdown)."""
        with self._cond:
            tasks = list(self._items)
            self._items.clear()
            if tasks and self.on_discard:
                self.on_discard(tasks)
            return tasks
