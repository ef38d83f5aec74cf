"""Run one task: pull the commit, run the job's command, collect and push artifacts.

The work is split in two halves so the worker can release shared state between
them: ``run`` covers pull, sync pull, command and artifact collection, and
``push`` covers the sync-repo push and the report push.
"""

from __future__ import annotations

import enum
import fnmatch
import logging
import os
import shutil
import signal
import subprocess
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path, PurePosixPath
from typing import Any, Callable, Mapping, Sequence

from .state import Task
from .vcs import RepoRef, VcsClient, VcsError
from .vcs.base import CHECKOUT_MARKERS

logger = logging.getLogger(__name__)

TAIL_BYTES = 64 * 1024
SAFE_PATH = "/usr/local/bin:/usr/bin:/bin"

StageCallback = Callable[[str, str], None]


class FailureStage(str, enum.Enum):
    PULL = "pull"
    SYNC_PULL = "sync_pull"
    RUN = "run"
    COLLECT = "collect"
    PUSH = "push"
    SYNC_PUSH = "sync_push"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class ReportTarget:
    url: str
    subdirectory: str = "reports"
    ref_name: str = "refs/heads/main"


@dataclass(frozen=True)
class JobSpec:
    job_name: str
    command: Sequence[str]
    repo_match: str = "*"
    artifact_globs: Sequence[str] = ()
    report_push_target: ReportTarget | None = None
    sync_repo: str | None = None
    sync_ref: str = "refs/heads/main"
    env: Mapping[str, str] = field(default_factory=dict)
    timeout_seconds: int = 600
    clone_url: str | None = None  # used by manual triggers that name no repo url

    def __post_init__(self) -> None:
        if not self.job_name:
            raise ValueError("job_name must be non-empty")
        if not self.command:
            raise ValueError(f"job {self.job_name}: command must be non-empty")
        if self.timeout_seconds <= 0:
            raise ValueError(f"job {self.job_name}: timeout_seconds must be positive")
        for pattern in self.artifact_globs:
            if _escapes(pattern):
                raise ValueError(f"job {self.job_name}: artifact glob {pattern!r} escapes the workspace")
        object.__setattr__(self, "command", tuple(self.command))
        object.__setattr__(self, "artifact_globs", tuple(self.artifact_globs))

    def matches(self, repo_name: str) -> bool:
        return fnmatch.fnmatchcase(repo_name, self.repo_match)


def _escapes(pattern: str) -> bool:
    p = PurePosixPath(pattern)
    return p.is_absolute() or ".." in p.parts


@dataclass(frozen=True)
class ExecutionReport:
    task_id: str
    exit_code: int = -1
    stdout_tail: str = ""
    stderr_tail: str = ""
    duration_ms: int = 0
    artifacts: tuple[tuple[str, int], ...] = ()
    failure_stage: FailureStage | None = None
    detail: str | None = None
    pulled_sha: str | None = None
    pushed: Mapping[str, str] = field(default_factory=dict)
    staging_dir: Path | None = field(default=None, compare=False)

    @property
    def success(self) -> bool:
        return self.exit_code == 0 and self.failure_stage is None

    def to_json(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "exit_code": self.exit_code,
            "stdout_tail": self.stdout_tail,
            "stderr_tail": self.stderr_tail,
            "duration_ms": self.duration_ms,
            "artifacts": [list(a) for a in self.artifacts],
            "failure_stage": self.failure_stage.value if self.failure_stage else None,
            "detail": self.detail,
            "pulled_sha": self.pulled_sha,
            "pushed": dict(self.pushed),
        }


@dataclass
class CommandResult:
    exit_code: int
    stdout: bytes
    stderr: bytes
    timed_out: bool = False


def _tail(fh, limit: int = TAIL_BYTES) -> bytes:
    fh.seek(0, os.SEEK_END)
    size = fh.tell()
    fh.seek(max(0, size - limit))
    return fh.read()


def run_command(
    command: Sequence[str],
    cwd: Path,
    env: Mapping[str, str],
    timeout: float | None,
    stdin: bytes | None = None,
    tail_bytes: int = TAIL_BYTES,
) -> CommandResult:
    """Run ``command`` in its own process group with bounded output capture.

    Output goes to temporary files and only the last ``tail_bytes`` of each
    stream are read back. On timeout the whole process group is killed.
    Raises OSError if the program cannot be started.
    """
    with tempfile.TemporaryFile() as out, tempfile.TemporaryFile() as err, tempfile.TemporaryFile() as inp:
        if stdin is not None:
            inp.write(stdin)
            inp.seek(0)
        proc = subprocess.Popen(
            list(command),
            cwd=cwd,
            env=dict(env),
            stdin=inp if stdin is not None else subprocess.DEVNULL,
            stdout=out,
            stderr=err,
            start_new_session=True,
        )
        timed_out = False
        try:
            proc.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            timed_out = True
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            proc.wait()
        return CommandResult(proc.returncode, _tail(out, tail_bytes), _tail(err, tail_bytes), timed_out)


def task_env(task: Task, spec: JobSpec, workspace: Path) -> dict[str, str]:
    """Scrubbed environment: nothing inherited from the server process."""
    env = {
        "PATH": SAFE_PATH,
        "HOME": str(workspace),
        "LANG": "C.UTF-8",
        "TASK_ID": task.task_id,
        "TASK_SOURCE": task.source.value,
        "TASK_REPO": task.repo_name,
        "TASK_REF": task.ref_name,
        "TASK_SHA": task.head_sha,
        "TASK_SUBMITTER": task.submitter,
        "TASK_JOB": task.job_name,
    }
    if spec.sync_repo:
        env["SYNC_DIR"] = str(workspace / "sync")
    for key, value in task.params.items():
        safe = "".join(c if c.isalnum() else "_" for c in key).upper()
        env[f"TASK_PARAM_{safe}"] = value
    env.update(spec.env)
    return env


class PipelineExecutor:
    def __init__(self, vcs: VcsClient, pull_mode: str = "pinned") -> None:
        if pull_mode not in ("pinned", "latest"):
            raise ValueError(f"pull_mode must be 'pinned' or 'latest', got {pull_mode!r}")
        self.vcs = vcs
        self.pull_mode = pull_mode

    def run(
        self,
        task: Task,
        spec: JobSpec,
        workspace: Path,
        on_stage: StageCallback | None = None,
    ) -> ExecutionReport:
        """Pull, sync-pull, run and collect. Never raises for a failing command."""
        stage = on_stage or (lambda name, detail: None)
        workspace = Path(workspace)
        started = time.monotonic()
        report = ExecutionReport(task_id=task.task_id)

        def done(**changes: Any) -> ExecutionReport:
            ms = int((time.monotonic() - started) * 1000)
            return replace(report, duration_ms=ms, **changes)

        head = task.head_sha if self.pull_mode == "pinned" and task.head_sha else None
        try:
            sha = self.vcs.pull(RepoRef(task.clone_url, task.ref_name, head), workspace)
        except (VcsError, OSError) as exc:
            stage("pull", f"failed: {exc}")
            return done(failure_stage=FailureStage.PULL, detail=str(exc))
        report = replace(report, pulled_sha=sha)
        stage("pull", sha)

        if spec.sync_repo:
            try:
                sync_sha = self.vcs.pull(RepoRef(spec.sync_repo, spec.sync_ref), workspace / "sync")
            except (VcsError, OSError) as exc:
                stage("sync_pull", f"failed: {exc}")
                return done(failure_stage=FailureStage.SYNC_PULL, detail=str(exc))
            stage("sync_pull", sync_sha)

        try:
            result = run_command(spec.command, workspace, task_env(task, spec, workspace), spec.timeout_seconds)
        except OSError as exc:
            stage("run", f"failed to start: {exc}")
            return done(failure_stage=FailureStage.RUN, detail=f"failed to start: {exc}")
        report = replace(
            report,
            exit_code=result.exit_code,
            stdout_tail=result.stdout.decode("utf-8", "replace"),
            stderr_tail=result.stderr.decode("utf-8", "replace"),
        )
        if result.timed_out:
            stage("run", "timeout")
            return done(failure_stage=FailureStage.TIMEOUT, detail=f"timeout after {spec.timeout_seconds}s")
        stage("run", f"exit {result.exit_code}")
        if result.exit_code != 0:
            return done(failure_stage=FailureStage.RUN, detail=f"exit code {result.exit_code}")

        staging = workspace.with_name(workspace.name + ".out") / task.task_id
        try:
            artifacts = collect_artifacts(workspace, spec.artifact_globs, staging)
        except (ValueError, OSError) as exc:
            stage("collect", f"failed: {exc}")
            shutil.rmtree(staging, ignore_errors=True)
            return done(failure_stage=FailureStage.COLLECT, detail=str(exc))
        stage("collect", f"{len(artifacts)} artifact(s)")
        return done(artifacts=tuple(artifacts), staging_dir=staging)

    def push(
        self,
        task: Task,
        spec: JobSpec,
        workspace: Path,
        report: ExecutionReport,
        on_stage: StageCallback | None = None,
    ) -> ExecutionReport:
        """Push the sync repo, then the collected report. Only for successful runs."""
        stage = on_stage or (lambda name, detail: None)
        if not report.success:
            return report
        pushed = dict(report.pushed)
        message = f"{task.job_name}: {task.repo_name}@{task.head_sha[:12] or task.ref_name} ({task.task_id})"
        try:
            if spec.sync_repo:
                try:
                    pushed["sync"] = self.vcs.push(Path(workspace) / "sync", RepoRef(spec.sync_repo, spec.sync_ref), message)
                except (VcsError, OSError) as exc:
                    stage("sync_push", f"failed: {exc}")
                    return replace(report, failure_stage=FailureStage.SYNC_PUSH, detail=str(exc), pushed=pushed)
                stage("sync_push", pushed["sync"])

            target = spec.report_push_target
            if target is not None:
                layout = report_layout(task, target, report)
                try:
                    pushed["report"] = self.vcs.push(layout, RepoRef(target.url, target.ref_name), message)
                except (VcsError, OSError) as exc:
                    stage("push", f"failed: {exc}")
                    return replace(report, failure_stage=FailureStage.PUSH, detail=str(exc), pushed=pushed)
                finally:
                    shutil.rmtree(layout, ignore_errors=True)
                stage("push", pushed["report"])
        finally:
            if report.staging_dir is not None:
                shutil.rmtree(report.staging_dir, ignore_errors=True)
        return replace(report, pushed=pushed)

    def execute_task(self, task: Task, spec: JobSpec, workspace: Path,
                     on_stage: StageCallback | None = None) -> ExecutionReport:
        report = self.run(task, spec, workspace, on_stage)
        return self.push(task, spec, workspace, report, on_stage)


def collect_artifacts(workspace: Path, globs: Sequence[str], staging: Path) -> list[tuple[str, int]]:
    """Copy files matching ``globs`` into ``staging``; return (relative path, size).

    Raises ValueError when a pattern or a match (through a symlink, say)
    resolves outside the workspace.
    """
    root = workspace.resolve()
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    found: dict[str, int] = {}
    for pattern in globs:
        if _escapes(pattern):
            raise ValueError(f"artifact glob {pattern!r} escapes the workspace")
        for match in sorted(workspace.glob(pattern)):
            resolved = match.resolve()
            if root not in resolved.parents:
                raise ValueError(f"artifact {match} resolves outside the workspace")
            if not resolved.is_file():
                continue
            rel = match.relative_to(workspace)
            if any(part in CHECKOUT_MARKERS for part in rel.parts):
                continue
            dest = staging / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(resolved, dest)
            found[rel.as_posix()] = dest.stat().st_size
    return sorted(found.items())


def _segment(name: str) -> str:
    name = name.replace("/", "_").replace("\\", "_")
    return "unknown" if name in ("", ".", "..") else name


def report_layout(task: Task, target: ReportTarget, report: ExecutionReport) -> Path:
    """Arrange staged artifacts as ``<subdirectory>/<submitter>/<sha or task id>/...``
    inside a fresh temporary directory, returned for pushing."""
    root = Path(tempfile.mkdtemp(prefix="hookrunner-report-"))
    leaf = root / PurePosixPath(target.subdirectory) if target.subdirectory else root
    leaf = leaf / _segment(task.submitter) / (task.head_sha or task.task_id)
    leaf.mkdir(parents=True, exist_ok=True)
    if report.staging_dir is not None:
        for rel, _size in report.artifacts:
            dest = leaf / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(report.staging_dir / rel, dest)
    return root
