"""Poisson-arrival webhook load generator.

Arrivals follow a seeded exponential inter-arrival schedule. While sending,
a sampler polls ``/status`` and checks the accounting identity on every
snapshot. Completion latency comes from the server's task log when given.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import math
import random
import threading
import time
import uuid
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import httpx

from .state import parse_ts
from .tasklog import read_jsonl

logger = logging.getLogger(__name__)


def arrival_schedule(rate_per_s: float, duration_s: float, seed: int) -> list[float]:
    """Offsets (seconds from start) of a Poisson process truncated at ``duration_s``."""
    if rate_per_s <= 0 or duration_s <= 0:
        return []
    rng = random.Random(seed)
    out = []
    t = rng.expovariate(rate_per_s)
    while t < duration_s:
        out.append(t)
        t += rng.expovariate(rate_per_s)
    return out


def push_payload(repo_name: str, sha: str, clone_url: str | None = None, pusher: str = "loadgen",
                 ref: str = "refs/heads/main") -> bytes:
    return json.dumps({
        "ref": ref,
        "before": "0" * 40,
        "after": sha,
        "repository": {"full_name": repo_name, "clone_url": clone_url or f"https://github.com/{repo_name}.git"},
        "pusher": {"name": pusher},
    }).encode()


def webhook_headers(body: bytes, secret: str | None, delivery_id: str | None = None) -> dict[str, str]:
    headers = {
        "Content-Type": "application/json",
        "X-GitHub-Event": "push",
        "X-GitHub-Delivery": delivery_id or str(uuid.uuid4()),
    }
    if secret:
        tag = hmac.new(secret.encode(), body, hashlib.sha256).hexdigest()
        headers["X-Hub-Signature-256"] = f"sha256={tag}"
    return headers


def percentile(values: list[float], q: float) -> float | None:
    """Nearest-rank percentile, q in [0, 100]."""
    if not values:
        return None
    ordered = sorted(values)
    rank = max(1, math.ceil(q / 100 * len(ordered)))
    return ordered[rank - 1]


def identity_holds(status: dict[str, Any]) -> bool:
    return status["accepted"] == (
        status["completed"] + status["failed"] + status["queue_depth"] + status["in_flight"]
    )


@dataclass
class LoadSummary:
    sent: int = 0
    accepted: int = 0
    rejected: int = 0
    other: int = 0
    errors: int = 0
    accepted_ids: list[str] = field(default_factory=list)
    samples: int = 0
    violations: int = 0
    drained: bool = False
    terminal: dict[str, int] = field(default_factory=dict)
    latency_ms: dict[str, float | None] = field(default_factory=dict)

    @property
    def conserved(self) -> bool | None:
        if not self.terminal:
            return None
        return self.accepted == sum(self.terminal.get(k, 0) for k in ("done", "failed", "abandoned"))

    def to_json(self) -> dict[str, Any]:
        return {
            "sent": self.sent,
            "accepted": self.accepted,
            "rejected": self.rejected,
            "other": self.other,
            "errors": self.errors,
            "status_samples": self.samples,
            "invariant_violations": self.violations,
            "drained": self.drained,
            "terminal": self.terminal,
            "conserved": self.conserved,
            "latency_ms": self.latency_ms,
        }


class _Sampler(threading.Thread):
    def __init__(self, url: str, hz: float) -> None:
        super().__init__(name="status-sampler", daemon=True)
        self.url = url
        self.period = 1.0 / hz
        self.stop_event = threading.Event()
        self.samples = 0
        self.violations = 0

    def run(self) -> None:
        with httpx.Client(timeout=2.0) as client:
            while not self.stop_event.is_set():
                t0 = time.monotonic()
                try:
                    status = client.get(f"{self.url}/status").json()
                    self.samples += 1
                    if not identity_holds(status):
                        self.violations += 1
                        logger.warning("accounting identity violated: %s", status)
                except httpx.HTTPError:
                    pass
                self.stop_event.wait(max(0.0, self.period - (time.monotonic() - t0)))


def run_loadgen(
    url: str,
    rate_per_s: float,
    duration_s: float,
    seed: int = 0,
    repo_name: str = "loadgen/repo",
    clone_url: str | None = None,
    secret: str | None = None,
    task_log: Path | None = None,
    sample_hz: float = 20.0,
    wait_s: float = 30.0,
) -> LoadSummary:
    url = url.rstrip("/")
    schedule = arrival_schedule(rate_per_s, duration_s, seed)
    summary = LoadSummary()
    sampler = _Sampler(url, sample_hz) if sample_hz > 0 else None
    if sampler:
        sampler.start()
    start = time.monotonic()
    with httpx.Client(timeout=5.0) as client:
        for i, offset in enumerate(schedule):
            delay = start + offset - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            sha = hashlib.sha1(f"{seed}:{i}".encode()).hexdigest()
            body = push_payload(repo_name, sha, clone_url)
            summary.sent += 1
            try:
                resp = client.post(f"{url}/webhook", content=body, headers=webhook_headers(body, secret))
            except httpx.HTTPError:
                summary.errors += 1
                continue
            if resp.status_code == 202:
                summary.accepted += 1
                summary.accepted_ids.append(resp.json()["task_id"])
            elif resp.status_code == 503:
                summary.rejected += 1
            else:
                summary.other += 1

        deadline = time.monotonic() + wait_s
        while time.monotonic() < deadline:
            try:
                status = client.get(f"{url}/status").json()
            except httpx.HTTPError:
                break
            if status["queue_depth"] == 0 and status["in_flight"] == 0:
                summary.drained = True
                break
            time.sleep(0.05)

    if sampler:
        sampler.stop_event.set()
        sampler.join()
        summary.samples, summary.violations = sampler.samples, sampler.violations

    if task_log is not None and Path(task_log).exists():
        wanted = set(summary.accepted_ids)
        latencies = []
        counts: Counter[str] = Counter()
        for rec in read_jsonl(Path(task_log)):
            if rec["task_id"] not in wanted:
                continue
            counts[rec["phase"]] += 1
            start_ts, end_ts = parse_ts(rec["enqueued_at"]), parse_ts(rec["finished_at"])
            latencies.append((end_ts - start_ts).total_seconds() * 1000)
        summary.terminal = dict(counts)
        summary.latency_ms = {f"p{q}": percentile(latencies, q) for q in (50, 90, 99)}
        summary.latency_ms["max"] = max(latencies) if latencies else None
    return summary
