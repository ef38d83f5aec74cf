"""Reader-writer lock guarding the shared server state.

Many readers may hold the lock at once; a writer excludes readers and other
writers. Waiting writers block new readers so a steady stream of status
requests cannot starve a worker trying to record an outcome.
"""

from __future__ import annotations

import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator

# Per-thread label describing what the holder is doing (e.g. a worker phase).
# Instrumentation records it so tests can assert no guard is held while a
# worker is executing a pipeline.
_activity = threading.local()


def set_activity(label: str | None) -> None:
    _activity.label = label


def current_activity() -> str | None:
    return getattr(_activity, "label", None)


class RWLock:
    def __init__(self) -> None:
        self._cond = threading.Condition(threading.Lock())
        self._readers = 0
        self._writer = False
        self._waiting_writers = 0

    def acquire_read(self) -> None:
        with self._cond:
            while self._writer or self._waiting_writers:
                self._cond.wait()
            self._readers += 1

    def release_read(self) -> None:
        with self._cond:
            self._readers -= 1
            if self._readers == 0:
                self._cond.notify_all()

    def acquire_write(self) -> None:
        with self._cond:
            self._waiting_writers += 1
            try:
                while self._writer or self._readers:
                    self._cond.wait()
            finally:
                self._waiting_writers -= 1
            self._writer = True

    def release_write(self) -> None:
        with self._cond:
            self._writer = False
            self._cond.notify_all()

    @contextmanager
    def read(self) -> Iterator[None]:
        self.acquire_read()
        try:
            yield
        finally:
            self.release_read()

    @contextmanager
    def write(self) -> Iterator[None]:
        self.acquire_write()
        try:
            yield
        finally:
            self.release_write()


@dataclass(frozen=True)
class GuardSpan:
    """One interval during which a thread held the lock."""

    mode: str  # "read" or "write"
    thread: str
    activity: str | None
    start: float
    end: float

    @property
    def duration(self) -> float:
        return self.end - self.start


class TracingRWLock(RWLock):
    """RWLock that records every hold interval (perf_counter seconds).

    Spans are recorded after release, so a span list read while other threads
    are active may lag by the holds still in progress.
    """

    def __init__(self) -> None:
        super().__init__()
        self._spans: list[GuardSpan] = []
        self._spans_lock = threading.Lock()

    def _record(self, mode: str, start: float) -> None:
        span = GuardSpan(mode, threading.current_thread().name, current_activity(), start, time.perf_counter())
        with self._spans_lock:
            self._spans.append(span)

    @contextmanager
    def read(self) -> Iterator[None]:
        self.acquire_read()
        start = time.perf_counter()
        try:
            yield
        finally:
            self._record("read", start)
            self.release_read()

    @contextmanager
    def write(self) -> Iterator[None]:
        self.acquire_write()
        start = time.perf_counter()
        try:
            yield
        finally:
            self._record("write", start)
            self.release_write()

    def spans(self) -> list[GuardSpan]:
        with self._spans_lock:
            return list(self._spans)

    def clear(self) -> None:
        with self._spans_lock:
            self._spans.clear()
