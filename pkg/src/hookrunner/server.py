"""Wire queue, shared state, workers and gateway into one running service."""

from __future__ import annotations

import logging
import threading

from .config import Config
from .executor import PipelineExecutor
from .gateway import Gateway
from .rwlock import RWLock
from .state import SharedState
from .taskqueue import TaskQueue
from .tasklog import PhaseTrace, TaskLog
from .vcs import AutoVcs, VcsClient
from .workers import WorkerConfig, WorkerPool

logger = logging.getLogger(__name__)


class AutomationServer:
    """Queue + state + worker pool + HTTP gateway.

    ``worker_count`` may override the config (tests use 0 to hold tasks in the
    queue). ``lock`` lets callers swap in an instrumented guard.
    """

    def __init__(
        self,
        config: Config,
        vcs: VcsClient | None = None,
        lock: RWLock | None = None,
        worker_count: int | None = None,
    ) -> None:
        self.config = config
        self.state = SharedState(config.queue_capacity, lock=lock)
        self.task_log = TaskLog(config.task_log_path)
        self.trace = PhaseTrace(config.trace_path)
        self.queue = TaskQueue(
            config.queue_capacity,
            on_accept=self._accepted,
            on_reject=lambda task: self.state.record_reject(),
            on_dequeue=self.state.record_dequeue,
            on_discard=self.state.record_abandoned,
        )
        self.executor = PipelineExecutor(vcs or AutoVcs(), pull_mode=config.pull)
        count = config.worker_count if worker_count is None else worker_count
        self.pool = WorkerPool(
            WorkerConfig(count, config.workspace_root),
            self.queue,
            self.state,
            self.executor,
            {job.job_name: job for job in config.jobs},
            task_log=self.task_log,
            trace=self.trace,
        )
        self.aborted = threading.Event()
        self.gateway = Gateway(
            config, self.queue, self.state,
            task_log=self.task_log,
            on_abort=self.aborted.set,
        )
        self._stopped = False

    def _accepted(self, task) -> None:
        # runs under the queue lock, so "queued" is traced before any worker sees the task
        self.state.record_accept(task)
        self.trace.emit(None, task.task_id, "queued", f"{task.source.value} {task.repo_name}")

    def start(self, host: str | None = None, port: int | None = None) -> "AutomationServer":
        # consumers first, then the listener
        self.pool.start()
        self.gateway.start(host, port)
        return self

    @property
    def url(self) -> str:
        return self.gateway.url

    def stop(self, drain: bool = True, timeout: float | None = None) -> None:
        if self._stopped:
            return
        self._stopped = True
        self.gateway.shutdown()
        self.pool.shutdown(drain=drain, timeout=timeout)
        self.task_log.close()
        self.trace.close()

    def __enter__(self) -> "AutomationServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop(drain=False)
