"""Server configuration: one JSON document.

Example::

    {
      "port": 8080,
      "worker_count": 4,
      "queue_capacity": 128,
      "on_full": "reject",
      "webhook_secret": "s3cret",
      "trigger_tokens": [{"token": "abc", "subject": "ta"}],
      "auth_codes": {"K": "jack"},
      "jobs": [{"job_name": "grade", "repo_match": "course/*",
                "command": ["sh", "grade.sh"], "artifact_globs": ["report.txt"],
                "report_push_target": {"url": "/srv/git/reports.git"}}],
      "workspace_root": "work",
      "task_log_path": "tasks.jsonl"
    }

Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .executor import JobSpec, ReportTarget
from .workers import default_worker_count

CONFIG_ENV = "GOAUTOBASH_CONFIG"


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str) -> None:
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class Config:
    port: int = 8080
    host: str = "0.0.0.0"
    worker_count: int = field(default_factory=default_worker_count)
    queue_capacity: int = 128
    on_full: str = "reject"
    webhook_secret: str | None = None
    trigger_tokens: list[tuple[str, str]] = field(default_factory=list)
    auth_codes: dict[str, str] = field(default_factory=dict)
    token_ttl_seconds: int = 3600
    jobs: list[JobSpec] = field(default_factory=list)
    default_job: str | None = None
    workspace_root: Path = Path("workspaces")
    task_log_path: Path = Path("tasks.jsonl")
    trace_path: Path | None = None
    pull: str = "pinned"
    dedupe_head_sha: bool = False
    drain_timeout_seconds: float = 30.0

    def validate(self) -> "Config":
        if not isinstance(self.port, int) or not 0 <= self.port <= 65535:
            raise ConfigError("port", "must be an integer in [0, 65535]")
        if not isinstance(self.worker_count, int) or self.worker_count < 1:
            raise ConfigError("worker_count", "must be a positive integer")
        if not isinstance(self.queue_capacity, int) or self.queue_capacity < 1:
            raise ConfigError("queue_capacity", "must be a positive integer")
        if self.on_full not in ("reject", "abort"):
            raise ConfigError("on_full", "must be 'reject' or 'abort'")
        if self.pull not in ("pinned", "latest"):
            raise ConfigError("pull", "must be 'pinned' or 'latest'")
        if self.token_ttl_seconds <= 0:
            raise ConfigError("token_ttl_seconds", "must be positive")
        if not self.jobs:
            raise ConfigError("jobs", "at least one job is required")
        names = [j.job_name for j in self.jobs]
        if len(set(names)) != len(names):
            raise ConfigError("jobs", "job names must be unique")
        if self.default_job is not None and self.default_job not in names:
            raise ConfigError("default_job", f"unknown job {self.default_job!r}")
        return self

    def job(self, name: str) -> JobSpec | None:
        return next((j for j in self.jobs if j.job_name == name), None)

    def job_for_repo(self, repo_name: str) -> JobSpec | None:
        return next((j for j in self.jobs if j.matches(repo_name)), None)

    @property
    def default_job_name(self) -> str:
        return self.default_job or self.jobs[0].job_name

    @classmethod
    def from_dict(cls, data: dict[str, Any], base_dir: Path | None = None) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        base = Path(base_dir or Path.cwd()).resolve()
        kwargs = dict(data)
        try:
            kwargs["jobs"] = [job_from_dict(j) for j in data.get("jobs", [])]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("jobs", str(exc)) from None
        try:
            kwargs["trigger_tokens"] = [(t["token"], t["subject"]) for t in data.get("trigger_tokens", [])]
        except (KeyError, TypeError):
            raise ConfigError("trigger_tokens", "entries need 'token' and 'subject'") from None
        kwargs["auth_codes"] = dict(data.get("auth_codes", {}))
        defaults = {"workspace_root": "workspaces", "task_log_path": "tasks.jsonl", "trace_path": None}
        for name, default in defaults.items():
            raw = data.get(name, default)
            if raw is None:
                kwargs[name] = None
            else:
                path = Path(raw)
                kwargs[name] = path if path.is_absolute() else base / path
        if kwargs["workspace_root"] is None or kwargs["task_log_path"] is None:
            raise ConfigError("workspace_root" if kwargs["workspace_root"] is None else "task_log_path",
                              "must be a path")
        return cls(**kwargs).validate()

    def to_dict(self) -> dict[str, Any]:
        return {
            "port": self.port,
            "host": self.host,
            "worker_count": self.worker_count,
            "queue_capacity": self.queue_capacity,
            "on_full": self.on_full,
            "webhook_secret": self.webhook_secret,
            "trigger_tokens": [{"token": t, "subject": s} for t, s in self.trigger_tokens],
            "auth_codes": dict(self.auth_codes),
            "token_ttl_seconds": self.token_ttl_seconds,
            "jobs": [job_to_dict(j) for j in self.jobs],
            "default_job": self.default_job,
            "workspace_root": str(self.workspace_root),
            "task_log_path": str(self.task_log_path),
            "trace_path": str(self.trace_path) if self.trace_path else None,
            "pull": self.pull,
            "dedupe_head_sha": self.dedupe_head_sha,
            "drain_timeout_seconds": self.drain_timeout_seconds,
        }


def job_from_dict(data: dict[str, Any]) -> JobSpec:
    target = data.get("report_push_target")
    if target is not None:
        target = ReportTarget(
            url=target["url"],
            subdirectory=target.get("subdirectory", "reports"),
            ref_name=target.get("ref", "refs/heads/main"),
        )
    return JobSpec(
        job_name=data["job_name"],
        command=tuple(data["command"]),
        repo_match=data.get("repo_match", "*"),
        artifact_globs=tuple(data.get("artifact_globs", ())),
        report_push_target=target,
        sync_repo=data.get("sync_repo"),
        sync_ref=data.get("sync_ref", "refs/heads/main"),
        env=dict(data.get("env", {})),
        timeout_seconds=int(data.get("timeout_seconds", 600)),
        clone_url=data.get("clone_url"),
    )


def job_to_dict(job: JobSpec) -> dict[str, Any]:
    out: dict[str, Any] = {
        "job_name": job.job_name,
        "repo_match": job.repo_match,
        "command": list(job.command),
        "artifact_globs": list(job.artifact_globs),
        "env": dict(job.env),
        "timeout_seconds": job.timeout_seconds,
        "sync_ref": job.sync_ref,
    }
    if job.report_push_target is not None:
        t = job.report_push_target
        out["report_push_target"] = {"url": t.url, "subdirectory": t.subdirectory, "ref": t.ref_name}
    if job.sync_repo is not None:
        out["sync_repo"] = job.sync_repo
    if job.clone_url is not None:
        out["clone_url"] = job.clone_url
    return out


def load_config(path: str | os.PathLike | None = None) -> Config:
    """Load from ``path``; ``$GOAUTOBASH_CONFIG`` takes precedence when set."""
    path = os.environ.get(CONFIG_ENV) or path
    if not path:
        raise ConfigError("config", f"no config file given (use --config or ${CONFIG_ENV})")
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON in {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a JSON object")
    return Config.from_dict(data, base_dir=path.parent)
