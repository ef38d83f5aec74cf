"""Append-only JSON-lines logs: terminal task records and per-phase traces."""

from __future__ import annotations

import json
import logging
import threading
import time
from pathlib import Path
from typing import Any, Iterator

from .state import Task, format_ts, utc_now

logger = logging.getLogger(__name__)


class JsonLines:
    """Thread-safe JSON-lines appender, flushed after every record.

    Records are also kept in memory when ``keep`` is true, which is the
    default only when there is no file to read them back from.
    """

    def __init__(self, path: Path | None = None, keep: bool | None = None) -> None:
        self.path = Path(path) if path else None
        self.keep = self.path is None if keep is None else keep
        self._lock = threading.Lock()
        self._records: list[dict[str, Any]] = []
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a", encoding="utf-8")

    def append(self, record: dict[str, Any]) -> None:
        line = json.dumps(record, sort_keys=False)
        with self._lock:
            if self.keep:
                self._records.append(record)
            if self._fh is not None:
                self._fh.write(line + "\n")
                self._fh.flush()

    def records(self) -> list[dict[str, Any]]:
        with self._lock:
            return list(self._records)

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None


def read_jsonl(path: Path) -> Iterator[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


class TaskLog(JsonLines):
    TERMINAL = ("done", "failed", "abandoned", "rejected")

    def record(
        self,
        task: Task,
        terminal: str,
        duration_ms: int | None = None,
        failure_stage: str | None = None,
        detail: str | None = None,
    ) -> None:
        if terminal not in self.TERMINAL:
            raise ValueError(f"not a terminal phase: {terminal}")
        self.append({
            "task_id": task.task_id,
            "source": task.source.value,
            "repo_name": task.repo_name,
            "job_name": task.job_name,
            "head_sha": task.head_sha,
            "submitter": task.submitter,
            "enqueued_at": format_ts(task.enqueued_at),
            "finished_at": format_ts(utc_now()),
            "phase": terminal,
            "duration_ms": duration_ms,
            "failure_stage": failure_stage,
            "detail": detail,
        })


class PhaseTrace(JsonLines):
    """One line per phase transition: ts, worker_id, task_id, phase, detail."""

    def emit(self, worker_id: int | None, task_id: str, phase: str, detail: str = "") -> None:
        self.append({
            "ts": time.time(),
            "worker_id": worker_id,
            "task_id": task_id,
            "phase": phase,
            "detail": detail,
        })
        logger.debug("worker=%s task=%s phase=%s %s", worker_id, task_id, phase, detail)
