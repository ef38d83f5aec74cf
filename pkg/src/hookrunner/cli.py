"""Command-line entry point.

Subcommands: ``serve``, ``inject``, ``status``, ``loadgen`` and ``diffgrade``.
Exit codes: 0 success, 1 usage/config error, 2 remote error, 3 aborted
because the queue overflowed under ``on_full=abort``.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

import httpx

from .config import ConfigError, load_config
from .diffgrade import DiffGradeSpec, run_diff_grade, write_reports
from .loadgen import push_payload, run_loadgen, webhook_headers

logger = logging.getLogger("hookrunner")

EXIT_OK, EXIT_USAGE, EXIT_REMOTE, EXIT_ABORT = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 by default; 2 means remote error here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def cmd_serve(args: argparse.Namespace) -> int:
    from .server import AutomationServer

    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.port is not None:
        config.port = args.port

    server = AutomationServer(config)
    try:
        server.start()
    except OSError as exc:
        print(f"cannot listen on {config.host}:{config.port}: {exc.strerror or exc}", file=sys.stderr)
        server.pool.shutdown(drain=False)
        return EXIT_USAGE
    print(f"listening on {server.url}", flush=True)

    stop = threading.Event()

    def on_signal(signum, frame):
        logger.info("received %s", signal.Signals(signum).name)
        stop.set()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    while not stop.is_set() and not server.aborted.is_set():
        stop.wait(0.1)

    if server.aborted.is_set():
        print("queue full with on_full=abort; exiting", file=sys.stderr)
        server.stop(drain=False, timeout=5)
        return EXIT_ABORT
    server.stop(drain=True, timeout=config.drain_timeout_seconds)
    return EXIT_OK


def cmd_inject(args: argparse.Namespace) -> int:
    body = push_payload(args.repo, args.sha, args.clone_url, pusher=args.pusher, ref=args.ref)
    try:
        resp = httpx.post(f"{args.url.rstrip('/')}/webhook", content=body,
                          headers=webhook_headers(body, args.secret), timeout=10)
    except httpx.HTTPError as exc:
        print(f"request failed: {exc}", file=sys.stderr)
        return EXIT_REMOTE
    if not resp.is_success:
        print(f"{resp.status_code} {resp.text}", file=sys.stderr)
        return EXIT_REMOTE
    data = resp.json()
    if "task_id" in data:
        print(data["task_id"])
    elif data.get("duplicate"):
        print("duplicate")
    else:
        print("ignored")
    return EXIT_OK


def format_status(status: dict) -> str:
    last = status.get("last_executed")
    last_text = "—" if not last else f"{last['task_id']} ({last['repo_name']} by {last['submitter']})"
    return (
        f"queue: {status['queue_depth']}, last: {last_text}\n"
        f"accepted: {status['accepted']}  completed: {status['completed']}  "
        f"failed: {status['failed']}  rejected: {status['rejected']}  in flight: {status.get('in_flight', 0)}"
    )


def cmd_status(args: argparse.Namespace) -> int:
    try:
        resp = httpx.get(f"{args.url.rstrip('/')}/status", timeout=5)
        resp.raise_for_status()
    except httpx.HTTPError as exc:
        print(f"cannot reach {args.url}: {exc}", file=sys.stderr)
        return EXIT_REMOTE
    print(format_status(resp.json()))
    return EXIT_OK


def cmd_loadgen(args: argparse.Namespace) -> int:
    try:
        summary = run_loadgen(
            args.url, args.rate, args.duration, seed=args.seed, repo_name=args.repo,
            clone_url=args.clone_url, secret=args.secret, task_log=args.task_log,
            sample_hz=args.sample_hz, wait_s=args.wait,
        )
    except httpx.HTTPError as exc:
        print(f"cannot reach {args.url}: {exc}", file=sys.stderr)
        return EXIT_REMOTE
    if args.json:
        print(json.dumps(summary.to_json(), indent=2))
        return EXIT_OK
    print(f"sent {summary.sent}: accepted {summary.accepted}, rejected {summary.rejected}, "
          f"other {summary.other}, errors {summary.errors}")
    print(f"status samples {summary.samples}, invariant violations {summary.violations}, "
          f"drained {summary.drained}")
    if summary.latency_ms:
        lat = "  ".join(f"{k}={v:.1f}ms" for k, v in summary.latency_ms.items() if v is not None)
        print(f"completion latency: {lat}")
        print(f"terminal records: {summary.terminal} (conserved: {summary.conserved})")
    return EXIT_OK


def cmd_diffgrade(args: argparse.Namespace) -> int:
    try:
        data = json.loads(Path(args.spec).read_text())
        spec = DiffGradeSpec.from_dict(data, base_dir=Path(args.spec).parent)
    except (OSError, ValueError, KeyError) as exc:
        print(f"invalid grading spec: {exc}", file=sys.stderr)
        return EXIT_USAGE
    report = run_diff_grade(spec, Path(args.workspace))
    write_reports(report, args.json_out, args.text_out)
    sys.stdout.write(report.to_text())
    return report.exit_code


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hookrunner", description="Webhook-driven pull/execute/push task server.")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("serve", help="run the queue, workers and HTTP listener")
    p.add_argument("--config", help="JSON config file (or set $GOAUTOBASH_CONFIG)")
    p.add_argument("--port", type=int, help="override the configured port")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("inject", help="send a synthetic push webhook")
    p.add_argument("--url", default="http://127.0.0.1:8080")
    p.add_argument("--repo", required=True, help="owner/name")
    p.add_argument("--sha", required=True, help="40-hex commit id")
    p.add_argument("--ref", default="refs/heads/main")
    p.add_argument("--clone-url")
    p.add_argument("--pusher", default="inject")
    p.add_argument("--secret", help="sign the payload with this webhook secret")
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("status", help="show queue depth, last task and counters")
    p.add_argument("--url", default="http://127.0.0.1:8080")
    p.set_defaults(func=cmd_status)

    p = sub.add_parser("loadgen", help="Poisson webhook load with accounting checks")
    p.add_argument("--url", default="http://127.0.0.1:8080")
    p.add_argument("--rate", type=float, required=True, help="mean arrivals per second")
    p.add_argument("--duration", type=float, required=True, help="seconds of arrivals")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--secret")
    p.add_argument("--repo", default="loadgen/repo")
    p.add_argument("--clone-url")
    p.add_argument("--task-log", type=Path, help="server task log, for completion latency")
    p.add_argument("--sample-hz", type=float, default=20.0)
    p.add_argument("--wait", type=float, default=30.0, help="seconds to wait for the queue to drain")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_loadgen)

    p = sub.add_parser("diffgrade", help="compare student and gold programs on shared inputs")
    p.add_argument("--spec", required=True, help="grading spec JSON")
    p.add_argument("--workspace", default=".")
    p.add_argument("--json-out", type=Path)
    p.add_argument("--text-out", type=Path)
    p.set_defaults(func=cmd_diffgrade)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
