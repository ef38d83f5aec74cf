"""Task, event and shared server-state types.

Shared state follows a copy-on-write discipline: a committed ``ServerState`` is
immutable, readers copy the reference under the read guard, and writers build a
draft, validate it, and swap it in under the write guard. Callers therefore
never hold the guard while doing slow work.
"""

from __future__ import annotations

import enum
import itertools
import logging
import re
import threading
import uuid
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from types import MappingProxyType
from typing import Any, Callable, Iterable, Mapping, TypeVar

from .rwlock import RWLock

logger = logging.getLogger(__name__)

SHA_RE = re.compile(r"^[0-9a-f]{40}$")

T = TypeVar("T")


def utc_now() -> datetime:
    now = datetime.now(timezone.utc)
    return now.replace(microsecond=now.microsecond // 1000 * 1000)


def format_ts(ts: datetime | None) -> str | None:
    if ts is None:
        return None
    return ts.isoformat(timespec="milliseconds").replace("+00:00", "Z")


def parse_ts(value: str | None) -> datetime | None:
    if value is None:
        return None
    return datetime.fromisoformat(value.replace("Z", "+00:00"))


_task_counter = itertools.count(1)
_task_counter_lock = threading.Lock()
_process_tag = uuid.uuid4().hex[:6]


def new_task_id() -> str:
    with _task_counter_lock:
        n = next(_task_counter)
    return f"t{_process_tag}-{n:06d}"


class Source(str, enum.Enum):
    WEBHOOK = "webhook"
    MANUAL = "manual"


class Phase(str, enum.Enum):
    QUEUED = "queued"
    READING = "reading"
    EXECUTING = "executing"
    WRITING = "writing"
    PUSHING = "pushing"
    DONE = "done"
    FAILED = "failed"

    @property
    def terminal(self) -> bool:
        return self in (Phase.DONE, Phase.FAILED)

    @property
    def in_flight(self) -> bool:
        return self in _IN_FLIGHT


_ORDER = [Phase.QUEUED, Phase.READING, Phase.EXECUTING, Phase.WRITING, Phase.PUSHING, Phase.DONE]
_IN_FLIGHT = frozenset({Phase.READING, Phase.EXECUTING, Phase.WRITING, Phase.PUSHING})


def legal_transition(old: Phase, new: Phase) -> bool:
    if old == new:
        return not old.terminal
    if old.terminal:
        return False
    if new == Phase.FAILED:
        return True
    return _ORDER.index(new) == _ORDER.index(old) + 1


@dataclass(frozen=True)
class PushEvent:
    repo_name: str
    clone_url: str
    ref_name: str
    head_sha: str
    pusher: str
    delivery_id: str = ""


@dataclass(frozen=True)
class Task:
    """One unit of pull-execute-push work. Immutable once built."""

    task_id: str
    source: Source
    repo_name: str
    clone_url: str
    ref_name: str
    head_sha: str
    submitter: str
    job_name: str
    enqueued_at: datetime = field(default_factory=utc_now)
    params: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.source == Source.WEBHOOK and not SHA_RE.match(self.head_sha):
            raise ValueError(f"webhook task needs a 40-hex head_sha, got {self.head_sha!r}")
        if self.source == Source.MANUAL and self.head_sha and not SHA_RE.match(self.head_sha):
            raise ValueError(f"head_sha must be 40 lowercase hex characters, got {self.head_sha!r}")
        # freeze params while keeping insertion order
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))

    @classmethod
    def from_push(cls, event: PushEvent, job_name: str) -> "Task":
        return cls(
            task_id=new_task_id(),
            source=Source.WEBHOOK,
            repo_name=event.repo_name,
            clone_url=event.clone_url,
            ref_name=event.ref_name,
            head_sha=event.head_sha,
            submitter=event.pusher,
            job_name=job_name,
        )

    def summary(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "source": self.source.value,
            "repo_name": self.repo_name,
            "ref_name": self.ref_name,
            "head_sha": self.head_sha,
            "submitter": self.submitter,
            "job_name": self.job_name,
            "enqueued_at": format_ts(self.enqueued_at),
        }


@dataclass(frozen=True)
class TaskStatus:
    task_id: str
    phase: Phase
    submitter: str = ""
    repo_name: str = ""
    job_name: str = ""
    worker_id: int | None = None
    enqueued_at: datetime | None = None
    started_at: datetime | None = None
    finished_at: datetime | None = None
    outcome: Any = None  # ExecutionReport once the writing phase has run
    reason: str | None = None

    def to_json(self) -> dict[str, Any]:
        outcome = self.outcome.to_json() if hasattr(self.outcome, "to_json") else self.outcome
        return {
            "task_id": self.task_id,
            "phase": self.phase.value,
            "submitter": self.submitter,
            "repo_name": self.repo_name,
            "job_name": self.job_name,
            "worker_id": self.worker_id,
            "enqueued_at": format_ts(self.enqueued_at),
            "started_at": format_ts(self.started_at),
            "finished_at": format_ts(self.finished_at),
            "reason": self.reason,
            "outcome": outcome,
        }


@dataclass(frozen=True)
class ServerState:
    capacity: int
    queue_depth: int = 0
    in_flight: int = 0
    last_executed: Mapping[str, Any] | None = None
    accepted_total: int = 0
    completed_total: int = 0
    failed_total: int = 0
    rejected_total: int = 0
    statuses: Mapping[str, TaskStatus] = field(default_factory=lambda: MappingProxyType({}))

    def accounting_holds(self) -> bool:
        return self.accepted_total == (
            self.completed_total + self.failed_total + self.queue_depth + self.in_flight
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "queue_depth": self.queue_depth,
            "last_executed": dict(self.last_executed) if self.last_executed else None,
            "accepted": self.accepted_total,
            "completed": self.completed_total,
            "failed": self.failed_total,
            "rejected": self.rejected_total,
            "in_flight": self.in_flight,
            "capacity": self.capacity,
        }


class StateError(RuntimeError):
    """A mutation would break a ServerState invariant; nothing was applied."""


class StateDraft:
    """Mutable working copy handed to a mutation callback."""

    def __init__(self, base: ServerState) -> None:
        self.queue_depth = base.queue_depth
        self.last_executed = base.last_executed
        self.accepted_total = base.accepted_total
        self.completed_total = base.completed_total
        self.failed_total = base.failed_total
        self.rejected_total = base.rejected_total
        self._base = base
        self._statuses = dict(base.statuses)
        self._touched: set[str] = set()

    def status(self, task_id: str) -> TaskStatus:
        return self._statuses[task_id]

    def put_status(self, status: TaskStatus) -> None:
        self._statuses[status.task_id] = status
        self._touched.add(status.task_id)

    def drop_status(self, task_id: str) -> None:
        # Only terminal records may be pruned; validated on commit.
        self._statuses.pop(task_id, None)
        self._touched.add(task_id)

    def _commit(self) -> ServerState:
        base = self._base
        in_flight = base.in_flight
        became = {Phase.DONE: 0, Phase.FAILED: 0}
        new_ids = 0
        for task_id in self._touched:
            old = base.statuses.get(task_id)
            new = self._statuses.get(task_id)
            if new is None:
                if old is not None and not old.phase.terminal:
                    raise StateError(f"cannot drop non-terminal status {task_id}")
                continue
            if old is None:
                if new.phase != Phase.QUEUED:
                    raise StateError(f"new task {task_id} must start queued, got {new.phase.value}")
                new_ids += 1
            elif not legal_transition(old.phase, new.phase):
                raise StateError(f"illegal transition {old.phase.value} -> {new.phase.value} for {task_id}")
            if new.phase.in_flight and new.worker_id is None:
                raise StateError(f"{task_id} in {new.phase.value} without worker_id")
            if new.phase == Phase.QUEUED and new.worker_id is not None:
                raise StateError(f"{task_id} queued with worker_id set")
            was_in_flight = old is not None and old.phase.in_flight
            in_flight += int(new.phase.in_flight) - int(was_in_flight)
            if new.phase.terminal and (old is None or not old.phase.terminal):
                became[new.phase] += 1

        if self.queue_depth < 0 or self.queue_depth > base.capacity:
            raise StateError(f"queue_depth {self.queue_depth} outside [0, {base.capacity}]")
        for name in ("accepted_total", "completed_total", "failed_total", "rejected_total"):
            if getattr(self, name) < getattr(base, name):
                raise StateError(f"{name} may not decrease")
        if self.accepted_total - base.accepted_total != new_ids:
            raise StateError("accepted_total must move with newly queued tasks")
        if self.completed_total - base.completed_total != became[Phase.DONE]:
            raise StateError("completed_total must move with transitions to done")
        if self.failed_total - base.failed_total != became[Phase.FAILED]:
            raise StateError("failed_total must move with transitions to failed")

        state = ServerState(
            capacity=base.capacity,
            queue_depth=self.queue_depth,
            in_flight=in_flight,
            last_executed=self.last_executed,
            accepted_total=self.accepted_total,
            completed_total=self.completed_total,
            failed_total=self.failed_total,
            rejected_total=self.rejected_total,
            statuses=MappingProxyType(self._statuses),
        )
        if not state.accounting_holds():
            raise StateError(
                f"accounting identity broken: accepted={state.accepted_total} "
                f"completed={state.completed_total} failed={state.failed_total} "
                f"queued={state.queue_depth} in_flight={state.in_flight}"
            )
        return state


class SharedState:
    """ServerState behind a reader-writer guard.

    ``snapshot`` may run concurrently with other snapshots. ``update`` applies a
    mutation atomically or not at all.
    """

    def __init__(self, capacity: int, lock: RWLock | None = None, retention: int = 10_000) -> None:
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.lock = lock or RWLock()
        self.retention = retention
        self._state = ServerState(capacity=capacity)
        self._terminal_order: list[str] = []

    def snapshot(self) -> ServerState:
        with self.lock.read():
            return self._state

    def update(self, mutation: Callable[[StateDraft], T]) -> T:
        with self.lock.write():
            draft = StateDraft(self._state)
            try:
                result = mutation(draft)
                new_state = draft._commit()
            except StateError:
                logger.error("rejected state mutation", exc_info=True)
                raise
            self._state = new_state
        return result

    # Convenience mutations used by the queue hooks and workers.

    def record_accept(self, task: Task) -> None:
        def apply(d: StateDraft) -> None:
            d.put_status(TaskStatus(
                task_id=task.task_id,
                phase=Phase.QUEUED,
                submitter=task.submitter,
                repo_name=task.repo_name,
                job_name=task.job_name,
                enqueued_at=task.enqueued_at,
            ))
            d.accepted_total += 1
            d.queue_depth += 1
        self.update(apply)

    def record_reject(self) -> None:
        def apply(d: StateDraft) -> None:
            d.rejected_total += 1
        self.update(apply)

    def record_dequeue(self, task: Task, worker_id: int) -> None:
        """Queued -> reading; this task becomes the last one being executed."""
        def apply(d: StateDraft) -> None:
            now = utc_now()
            d.put_status(replace(d.status(task.task_id), phase=Phase.READING, worker_id=worker_id, started_at=now))
            d.queue_depth -= 1
            d.last_executed = MappingProxyType({**task.summary(), "worker_id": worker_id, "started_at": format_ts(now)})
        self.update(apply)

    def set_phase(self, task_id: str, phase: Phase, **changes: Any) -> None:
        def apply(d: StateDraft) -> None:
            d.put_status(replace(d.status(task_id), phase=phase, **changes))
        self.update(apply)

    def finish(self, task_id: str, ok: bool, outcome: Any = None, reason: str | None = None) -> TaskStatus:
        phase = Phase.DONE if ok else Phase.FAILED

        def apply(d: StateDraft) -> TaskStatus:
            old = d.status(task_id)
            if not legal_transition(old.phase, phase):
                raise StateError(f"illegal transition {old.phase.value} -> {phase.value} for {task_id}")
            status = replace(
                old,
                phase=phase,
                finished_at=utc_now(),
                outcome=outcome if outcome is not None else old.outcome,
                reason=reason,
            )
            d.put_status(status)
            if ok:
                d.completed_total += 1
            else:
                d.failed_total += 1
            self._prune(d, task_id)
            return status
        return self.update(apply)

    def record_abandoned(self, tasks: Iterable[Task]) -> None:
        """Queued tasks removed at shutdown count as failed with reason 'abandoned'."""
        tasks = list(tasks)
        if not tasks:
            return

        def apply(d: StateDraft) -> None:
            now = utc_now()
            for task in tasks:
                d.put_status(replace(d.status(task.task_id), phase=Phase.FAILED, finished_at=now, reason="abandoned"))
                d.queue_depth -= 1
                d.failed_total += 1
        self.update(apply)

    def _prune(self, d: StateDraft, task_id: str) -> None:
        # Runs under the write guard inside a mutation.
        self._terminal_order.append(task_id)
        while len(self._terminal_order) > self.retention:
            d.drop_status(self._terminal_order.pop(0))
