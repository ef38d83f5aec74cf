"""Consumers that drain the task queue.

Each worker loops over the queue and moves every task through reading,
executing, writing and pushing. Shared state is touched only in short
critical sections; the pipeline itself runs with no guard held.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .executor import ExecutionReport, JobSpec, PipelineExecutor
from .rwlock import set_activity
from .state import Phase, SharedState, Task
from .taskqueue import QueueClosed, TaskQueue
from .tasklog import PhaseTrace, TaskLog

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WorkerConfig:
    worker_count: int
    workspace_root: Path

    def __post_init__(self) -> None:
        # zero workers is allowed at the library level (a paused pool); the
        # serve command's config validation insists on at least one
        if self.worker_count < 0:
            raise ValueError("worker_count must be non-negative")

    def workspace(self, worker_id: int) -> Path:
        return Path(self.workspace_root) / f"worker-{worker_id}"


def default_worker_count() -> int:
    return os.cpu_count() or 1


class WorkerPool:
    def __init__(
        self,
        config: WorkerConfig,
        queue: TaskQueue,
        state: SharedState,
        executor: PipelineExecutor,
        jobs: Mapping[str, JobSpec],
        task_log: TaskLog | None = None,
        trace: PhaseTrace | None = None,
    ) -> None:
        self.config = config
        self.queue = queue
        self.state = state
        self.executor = executor
        self.jobs = dict(jobs)
        self.task_log = task_log or TaskLog()
        self.trace = trace or PhaseTrace()
        self._threads: list[threading.Thread] = []
        self._shutdown_lock = threading.Lock()
        self._shut_down = False

    def start(self) -> "WorkerPool":
        workspaces = [self.config.workspace(i) for i in range(1, self.config.worker_count + 1)]
        for ws in workspaces:
            ws.mkdir(parents=True, exist_ok=True)
        for worker_id in range(1, self.config.worker_count + 1):
            t = threading.Thread(target=self.worker_loop, args=(worker_id,), name=f"worker-{worker_id}", daemon=True)
            self._threads.append(t)
            t.start()
        logger.info("started %d worker(s) under %s", self.config.worker_count, self.config.workspace_root)
        return self

    def worker_loop(self, worker_id: int) -> None:
        while True:
            set_activity("idle")
            try:
                task = self.queue.dequeue_blocking(worker_id)
            except QueueClosed:
                break
            try:
                self.process(task, worker_id)
            except Exception as exc:  # never let one task kill the worker
                logger.exception("worker %d crashed on %s", worker_id, task.task_id)
                try:
                    self._fail(task, worker_id, None, reason=f"crash: {exc}")
                except Exception:
                    logger.exception("could not record failure of %s", task.task_id)
            finally:
                set_activity("idle")
        set_activity(None)
        logger.debug("worker %d exiting", worker_id)

    def process(self, task: Task, worker_id: int) -> None:
        # Reading: the dequeue hook already recorded phase=reading under the
        # write guard. Copy what this task needs under a read guard.
        set_activity("reading")
        self.trace.emit(worker_id, task.task_id, "reading")
        snapshot = self.state.snapshot()
        spec = self.jobs[task.job_name]
        workspace = self.config.workspace(worker_id)
        logger.debug("worker %d took %s (queue depth %d)", worker_id, task.task_id, snapshot.queue_depth)

        self.state.set_phase(task.task_id, Phase.EXECUTING)
        set_activity("executing")
        self.trace.emit(worker_id, task.task_id, "executing")
        report = self.executor.run(task, spec, workspace, on_stage=self._stage(worker_id, task, "executing"))

        set_activity("writing")
        self.trace.emit(worker_id, task.task_id, "writing")
        self.state.set_phase(task.task_id, Phase.WRITING, outcome=report)
        if not report.success:
            self._fail(task, worker_id, report)
            return

        self.state.set_phase(task.task_id, Phase.PUSHING)
        set_activity("pushing")
        self.trace.emit(worker_id, task.task_id, "pushing")
        report = self.executor.push(task, spec, workspace, report, on_stage=self._stage(worker_id, task, "pushing"))
        if not report.success:
            self._fail(task, worker_id, report)
            return

        set_activity("writing")
        self.state.finish(task.task_id, ok=True, outcome=report)
        self.task_log.record(task, "done", duration_ms=report.duration_ms)
        self.trace.emit(worker_id, task.task_id, "done", f"{report.duration_ms}ms")

    def _stage(self, worker_id: int, task: Task, phase: str):
        def emit(stage: str, detail: str) -> None:
            self.trace.emit(worker_id, task.task_id, phase, f"{stage}: {detail}")
        return emit

    def _fail(self, task: Task, worker_id: int, report: ExecutionReport | None, reason: str | None = None) -> None:
        set_activity("writing")
        stage = report.failure_stage.value if report and report.failure_stage else None
        if reason is None:
            reason = stage or (f"exit code {report.exit_code}" if report else "failed")
        current = self.state.snapshot().statuses.get(task.task_id)
        if current is not None and not current.phase.terminal:
            self.state.finish(task.task_id, ok=False, outcome=report, reason=reason)
        self.task_log.record(
            task, "failed",
            duration_ms=report.duration_ms if report else None,
            failure_stage=stage,
            detail=(report.detail if report else None) or reason,
        )
        self.trace.emit(worker_id, task.task_id, "failed", reason)

    def abandon_pending(self) -> list[Task]:
        tasks = self.queue.discard_pending()
        for task in tasks:
            self.task_log.record(task, "abandoned")
            self.trace.emit(None, task.task_id, "failed", "abandoned")
        return tasks

    def shutdown(self, drain: bool = True, timeout: float | None = None) -> None:
        """Close the queue and join the workers.

        ``drain=True`` lets workers finish everything queued; if ``timeout``
        expires first, the rest is abandoned. ``drain=False`` abandons queued
        tasks at once and waits only for in-flight ones. Repeat calls are no-ops.
        """
        with self._shutdown_lock:
            if self._shut_down:
                return
            self._shut_down = True
        self.queue.close()
        if not drain or not self._threads:
            self.abandon_pending()
        if not self._join(timeout):
            logger.warning("drain deadline passed; abandoning %d queued task(s)", self.queue.size())
            self.abandon_pending()
            self._join(None)

    def _join(self, timeout: float | None) -> bool:
        end = None if timeout is None else time.monotonic() + timeout
        for t in self._threads:
            t.join(None if end is None else max(0.0, end - time.monotonic()))
        return not any(t.is_alive() for t in self._threads)

    def join(self) -> None:
        self._join(None)
