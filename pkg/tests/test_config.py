import json

import pytest

from hookrunner.config import CONFIG_ENV, Config, ConfigError, load_config
from hookrunner.executor import JobSpec, ReportTarget

FULL = {
    "port": 9000,
    "worker_count": 3,
    "queue_capacity": 10,
    "on_full": "abort",
    "webhook_secret": "s",
    "trigger_tokens": [{"token": "abc", "subject": "ta"}],
    "auth_codes": {"K": "jack"},
    "jobs": [{
        "job_name": "grade",
        "repo_match": "course/*",
        "command": ["sh", "grade.sh"],
        "artifact_globs": ["report.txt", "out/*.log"],
        "report_push_target": {"url": "/srv/reports.git", "subdirectory": "r"},
        "sync_repo": "/srv/sync.git",
        "env": {"LEVEL": "2"},
        "timeout_seconds": 300,
    }],
    "workspace_root": "work",
    "task_log_path": "logs/tasks.jsonl",
    "trace_path": "logs/trace.jsonl",
    "pull": "latest",
}


def write(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def test_load_resolves_paths(tmp_path):
    cfg = load_config(write(tmp_path, FULL))
    assert cfg.workspace_root == tmp_path.resolve() / "work"
    assert cfg.task_log_path.is_absolute() and cfg.trace_path.is_absolute()
    (job,) = cfg.jobs
    assert job.report_push_target == ReportTarget("/srv/reports.git", "r")
    assert job.command == ("sh", "grade.sh") and job.env == {"LEVEL": "2"}
    assert cfg.trigger_tokens == [("abc", "ta")]
    assert cfg.job_for_repo("course/alice") is job and cfg.job_for_repo("x/y") is None


def test_round_trip(tmp_path):
    cfg = load_config(write(tmp_path, FULL))
    again = load_config(write(tmp_path, cfg.to_dict(), "again.json"))
    assert again == cfg


def test_defaults(tmp_path):
    cfg = load_config(write(tmp_path, {"jobs": [{"job_name": "j", "command": ["true"]}]}))
    assert (cfg.port, cfg.queue_capacity, cfg.on_full, cfg.pull) == (8080, 128, "reject", "pinned")
    assert cfg.worker_count >= 1 and cfg.default_job_name == "j"


@pytest.mark.parametrize("field,value", [
    ("worker_count", 0),
    ("queue_capacity", 0),
    ("on_full", "explode"),
    ("pull", "sometimes"),
    ("port", 70000),
    ("jobs", []),
    ("default_job", "nope"),
    ("mystery", 1),
])
def test_invalid_field_named(tmp_path, field, value):
    data = dict(FULL, **{field: value})
    with pytest.raises(ConfigError) as info:
        load_config(write(tmp_path, data))
    assert info.value.field == field
    assert field in str(info.value)


def test_bad_job_entry(tmp_path):
    data = dict(FULL, jobs=[{"job_name": "j"}])
    with pytest.raises(ConfigError) as info:
        load_config(write(tmp_path, data))
    assert info.value.field == "jobs"


def test_env_overrides_flag(tmp_path, monkeypatch):
    a = write(tmp_path, dict(FULL, port=1111), "a.json")
    b = write(tmp_path, dict(FULL, port=2222), "b.json")
    monkeypatch.setenv(CONFIG_ENV, str(b))
    assert load_config(a).port == 2222
    monkeypatch.delenv(CONFIG_ENV)
    assert load_config(a).port == 1111


def test_missing_and_malformed(tmp_path, monkeypatch):
    monkeypatch.delenv(CONFIG_ENV, raising=False)
    with pytest.raises(ConfigError):
        load_config(None)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_duplicate_job_names(tmp_path):
    with pytest.raises(ConfigError):
        Config(jobs=[JobSpec("j", ["true"]), JobSpec("j", ["false"])]).validate()
