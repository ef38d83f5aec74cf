import shutil
import sys
import time
from pathlib import Path

import pytest

from hookrunner import AutomationServer, Config, JobSpec
from hookrunner.vcs import FakeVcs

PY = sys.executable


def wait_until(predicate, timeout=5.0, interval=0.01):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()


def sleep_cmd(seconds):
    return [PY, "-c", f"import time; time.sleep({seconds})"]


@pytest.fixture
def fake_vcs(tmp_path):
    return FakeVcs(tmp_path / "vcs")


@pytest.fixture
def make_config(tmp_path):
    def make(jobs=None, **overrides):
        if jobs is None:
            jobs = [JobSpec("noop", ["true"])]
        values = dict(
            port=0,
            host="127.0.0.1",
            worker_count=1,
            queue_capacity=16,
            jobs=list(jobs),
            workspace_root=tmp_path / "workspaces",
            task_log_path=tmp_path / "tasks.jsonl",
            trigger_tokens=[("tok-ta", "ta"), ("tok-alice", "alice"), ("tok-bob", "bob")],
            auth_codes={"K": "jack"},
        )
        values.update(overrides)
        return Config(**values).validate()
    return make


@pytest.fixture
def start_server():
    servers = []

    def start(config, fake=None, **kwargs):
        server = AutomationServer(config, **kwargs).start()
        if fake is not None:
            fake.webhook_url = server.url + "/webhook"
            fake.secret = config.webhook_secret.encode() if config.webhook_secret else None
        servers.append(server)
        return server

    yield start
    for server in servers:
        server.stop(drain=False, timeout=10)


requires_git = pytest.mark.skipif(shutil.which("git") is None, reason="git not installed")


def trace_phases(trace_records, task_id):
    """Phase sequence for one task, collapsing the per-stage lines of a phase."""
    out = []
    for r in trace_records:
        if r["task_id"] == task_id and (not out or out[-1] != r["phase"]):
            out.append(r["phase"])
    return out


def read_log(path: Path):
    import json
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


class ServeProcess:
    """``hookrunner serve`` in a child process; ``url`` is parsed from its banner."""

    def __init__(self, config_path: Path, env=None, timeout: float = 10.0):
        import os
        import queue
        import subprocess
        import threading

        full_env = dict(os.environ)
        full_env.pop("GOAUTOBASH_CONFIG", None)
        full_env.update(env or {})
        self.proc = subprocess.Popen(
            [PY, "-m", "hookrunner", "--log-level", "WARNING", "serve", "--config", str(config_path)],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, env=full_env,
        )
        lines: "queue.Queue[str]" = queue.Queue()

        def pump():
            for line in self.proc.stdout:
                lines.put(line)
            lines.put("")  # EOF

        threading.Thread(target=pump, daemon=True).start()
        self.url = None
        try:
            first = lines.get(timeout=timeout)
        except queue.Empty:
            first = ""
        if first.startswith("listening on "):
            self.url = first.split()[-1]

    def wait(self, timeout=15.0):
        return self.proc.wait(timeout)

    def stderr(self):
        return self.proc.stderr.read() if self.proc.poll() is not None else ""

    def kill(self):
        if self.proc.poll() is None:
            self.proc.kill()
            self.proc.wait()


@pytest.fixture
def serve_process():
    procs = []

    def launch(config_path, env=None):
        p = ServeProcess(config_path, env)
        procs.append(p)
        return p

    yield launch
    for p in procs:
        p.kill()


# One PASS/FAIL line per acceptance check, printed after the run.
_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if item.get_closest_marker("acceptance") is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = dict(item.user_properties).get("measured", "")
        _ACCEPTANCE.append((item.name, rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip())
