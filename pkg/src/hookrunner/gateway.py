"""HTTP front door: ping, status, trigger, webhook, queue and auth routes.

Handlers never wait on task execution. They read shared state through
snapshots and hand work to the queue; everything else happens in workers.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import secrets
import socket
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Mapping, Protocol
from urllib.parse import unquote_plus, urlsplit

from .config import Config
from .state import SHA_RE, PushEvent, SharedState, Source, Task, format_ts, new_task_id, utc_now
from .taskqueue import EnqueueResult, QueueClosed, TaskQueue
from .tasklog import TaskLog

logger = logging.getLogger(__name__)

ANY = frozenset({"GET", "HEAD", "POST", "PUT", "PATCH", "DELETE", "OPTIONS"})
ROUTES: dict[str, frozenset[str]] = {
    "/ping": frozenset({"GET"}),
    "/status": frozenset({"GET"}),
    "/trigger": frozenset({"GET"}),
    "/webhook": frozenset({"POST"}),
    "/queue": frozenset({"GET"}),
    "/auth": ANY,
}

EVENT_HEADER = "X-GitHub-Event"
DELIVERY_HEADER = "X-GitHub-Delivery"
SIGNATURE_HEADER = "X-Hub-Signature-256"
MAX_BODY = 25 * 1024 * 1024
DELIVERY_WINDOW = 600.0


def parse_query(raw_query: str) -> dict[str, str]:
    """Split ``a=1&b=2`` into an ordered dict.

    Empty segments (``a=1&&b=2``) are dropped, a later duplicate key wins, and
    keys and values are percent-decoded (``+`` means space).
    """
    out: dict[str, str] = {}
    for segment in raw_query.split("&"):
        if not segment:
            continue
        key, _, value = segment.partition("=")
        out[unquote_plus(key)] = unquote_plus(value)
    return out


def verify_signature(secret: bytes, raw_body: bytes, signature: str) -> bool:
    """Constant-time check of a hex HMAC-SHA256 tag over ``raw_body``."""
    try:
        given = bytes.fromhex(signature)
    except (ValueError, TypeError):
        return False
    if len(given) != hashlib.sha256().digest_size:
        return False
    expected = hmac.new(secret, raw_body, hashlib.sha256).digest()
    return hmac.compare_digest(expected, given)


class PayloadError(ValueError):
    pass


def parse_push_event(raw_body: bytes, delivery_id: str = "") -> PushEvent:
    try:
        data = json.loads(raw_body)
    except (ValueError, UnicodeDecodeError) as exc:
        raise PayloadError(f"malformed JSON: {exc}") from None
    if not isinstance(data, dict):
        raise PayloadError("payload must be a JSON object")

    def get(*path: str) -> str:
        node: Any = data
        for key in path:
            if not isinstance(node, dict) or key not in node:
                raise PayloadError(f"missing field: {'.'.join(path)}")
            node = node[key]
        if not isinstance(node, str) or not node:
            raise PayloadError(f"missing field: {'.'.join(path)}")
        return node

    return PushEvent(
        repo_name=get("repository", "full_name"),
        clone_url=get("repository", "clone_url"),
        ref_name=get("ref"),
        head_sha=get("after"),
        pusher=get("pusher", "name"),
        delivery_id=delivery_id,
    )


@dataclass(frozen=True)
class WebhookEnvelope:
    event_kind: str
    delivery_id: str
    signature: str | None
    raw_body: bytes


@dataclass(frozen=True)
class AuthToken:
    bearer: str
    subject: str
    expires_at: datetime

    def valid(self, now: datetime | None = None) -> bool:
        return (now or utc_now()) < self.expires_at

    def to_json(self) -> dict[str, Any]:
        return {"token": self.bearer, "subject": self.subject, "expires_at": format_ts(self.expires_at)}


class TokenProvider(Protocol):
    def exchange(self, code: str) -> str | None:
        """Return the account name for an authorization code, or None."""


class MockTokenProvider:
    """In-process stand-in for an OAuth2 provider: a fixed code -> subject map."""

    def __init__(self, codes: Mapping[str, str]) -> None:
        self.codes = dict(codes)

    def exchange(self, code: str) -> str | None:
        return self.codes.get(code)


class TokenStore:
    def __init__(self, ttl_seconds: float = 3600, static: list[tuple[str, str]] | None = None) -> None:
        self.ttl = timedelta(seconds=ttl_seconds)
        self._lock = threading.Lock()
        self._tokens: dict[str, AuthToken] = {}
        for bearer, subject in static or []:
            self._tokens[bearer] = AuthToken(bearer, subject, datetime.max.replace(tzinfo=utc_now().tzinfo))

    def issue(self, subject: str) -> AuthToken:
        token = AuthToken(secrets.token_urlsafe(24), subject, utc_now() + self.ttl)
        with self._lock:
            self._tokens[token.bearer] = token
        return token

    def authenticate(self, bearer: str | None) -> AuthToken | None:
        if not bearer:
            return None
        with self._lock:
            token = self._tokens.get(bearer)
            if token is not None and not token.valid():
                del self._tokens[bearer]
                return None
        return token


@dataclass
class Response:
    status: int
    body: Any = None  # dict/list -> JSON, str -> text/plain
    headers: dict[str, str] = field(default_factory=dict)
    abort: bool = False  # stop the process once this response is sent

    def encode(self) -> tuple[bytes, str]:
        if self.body is None:
            return b"", "text/plain; charset=utf-8"
        if isinstance(self.body, str):
            return self.body.encode(), "text/plain; charset=utf-8"
        return json.dumps(self.body).encode(), "application/json"


class Gateway:
    def __init__(
        self,
        config: Config,
        queue: TaskQueue,
        state: SharedState,
        task_log: TaskLog | None = None,
        tokens: TokenStore | None = None,
        provider: TokenProvider | None = None,
        on_abort: Callable[[], None] | None = None,
    ) -> None:
        self.config = config
        self.queue = queue
        self.state = state
        self.task_log = task_log or TaskLog()
        self.tokens = tokens or TokenStore(config.token_ttl_seconds, config.trigger_tokens)
        self.provider = provider or MockTokenProvider(config.auth_codes)
        self.secret = config.webhook_secret.encode() if config.webhook_secret else None
        self.on_abort = on_abort
        self.parse_count = 0  # instrumented: payload parses attempted
        self._deliveries: dict[str, float] = {}
        self._deliveries_lock = threading.Lock()
        self._count_lock = threading.Lock()
        self._httpd: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    # Route handlers -----------------------------------------------------

    def handle_ping(self) -> Response:
        return Response(200, "pong")

    def handle_status(self) -> Response:
        return Response(200, self.state.snapshot().to_json())

    def handle_trigger(self, query: Mapping[str, str], bearer: str | None) -> Response:
        auth = self.tokens.authenticate(bearer)
        if auth is None:
            return Response(401, {"error": "missing or invalid bearer token"})
        job_name = query.get("job") or self.config.default_job_name
        job = self.config.job(job_name)
        if job is None:
            return Response(400, {"error": f"unknown job: {job_name}"})
        clone_url = query.get("clone_url") or job.clone_url
        if not clone_url:
            return Response(400, {"error": "no clone_url given and job has none configured"})
        ref = query.get("ref", "refs/heads/main")
        if not ref.startswith("refs/"):
            ref = f"refs/heads/{ref}"
        try:
            task = Task(
                task_id=new_task_id(),
                source=Source.MANUAL,
                repo_name=query.get("repo") or job.job_name,
                clone_url=clone_url,
                ref_name=ref,
                head_sha=query.get("sha", ""),
                submitter=query.get("user") or auth.subject,
                job_name=job.job_name,
                params=dict(query),
            )
        except ValueError as exc:
            return Response(400, {"error": str(exc)})
        return self._enqueue(task)

    def handle_webhook(self, envelope: WebhookEnvelope) -> Response:
        if self.secret is not None:
            sig = envelope.signature or ""
            if not sig.startswith("sha256=") or not verify_signature(self.secret, envelope.raw_body, sig[7:]):
                return Response(401, {"error": "bad signature"})
        if envelope.event_kind != "push":
            return Response(200, {"ignored": True})
        if envelope.delivery_id and self._seen_delivery(envelope.delivery_id):
            return Response(200, {"duplicate": True})

        with self._count_lock:
            self.parse_count += 1
        try:
            event = parse_push_event(envelope.raw_body, envelope.delivery_id)
        except PayloadError as exc:
            return Response(400, {"error": str(exc)})
        if not SHA_RE.match(event.head_sha):
            return Response(400, {"error": "after must be a 40-hex commit id"})
        job = self.config.job_for_repo(event.repo_name)
        if job is None:
            return Response(200, {"ignored": True})
        response = self._enqueue(Task.from_push(event, job.job_name), webhook=True)
        if response.status == 202 and envelope.delivery_id:
            with self._deliveries_lock:
                self._deliveries[envelope.delivery_id] = time.monotonic()
        return response

    def handle_queue(self, bearer: str | None) -> Response:
        auth = self.tokens.authenticate(bearer)
        if auth is None:
            return Response(401, {"error": "missing or invalid bearer token"})
        snap = self.state.snapshot()
        mine = [s.to_json() for s in snap.statuses.values() if s.submitter == auth.subject]
        return Response(200, mine)

    def handle_auth(self, params: Mapping[str, str]) -> Response:
        code = params.get("code")
        subject = self.provider.exchange(code) if code else None
        if subject is None:
            return Response(401, {"error": "unknown code"})
        return Response(200, self.tokens.issue(subject).to_json())

    # Helpers -------------------------------------------------------------

    def _seen_delivery(self, delivery_id: str) -> bool:
        now = time.monotonic()
        with self._deliveries_lock:
            for key, ts in list(self._deliveries.items()):
                if now - ts > DELIVERY_WINDOW:
                    del self._deliveries[key]
            return delivery_id in self._deliveries

    def _enqueue(self, task: Task, webhook: bool = False) -> Response:
        dedupe = None
        if webhook and self.config.dedupe_head_sha:
            dedupe = lambda t: (t.repo_name, t.head_sha)  # noqa: E731
        try:
            result = self.queue.enqueue(task, dedupe_key=dedupe)
        except QueueClosed:
            return Response(503, {"error": "shutting down"})
        if result == EnqueueResult.ACCEPTED:
            return Response(202, {"task_id": task.task_id, "queued": True})
        if result == EnqueueResult.DUPLICATE:
            return Response(200, {"duplicate": True})
        self.task_log.record(task, "rejected", detail="queue full")
        if self.config.on_full == "abort":
            logger.critical("queue full (capacity %d) with on_full=abort", self.queue.capacity)
            return Response(503, {"error": "queue full"}, abort=True)
        return Response(503, {"error": "queue full"})

    # HTTP plumbing ---------------------------------------------------------

    def dispatch(self, method: str, target: str, headers: Mapping[str, str], body: bytes) -> Response:
        parts = urlsplit(target)
        path = parts.path.rstrip("/") or "/"
        allowed = ROUTES.get(path)
        if allowed is None:
            return Response(404, {"error": "not found"})
        if method not in allowed:
            return Response(405, {"error": "method not allowed"}, headers={"Allow": ", ".join(sorted(allowed))})
        query = parse_query(parts.query)
        bearer = _bearer(headers.get("Authorization"))
        if path == "/ping":
            return self.handle_ping()
        if path == "/status":
            return self.handle_status()
        if path == "/trigger":
            return self.handle_trigger(query, bearer)
        if path == "/queue":
            return self.handle_queue(bearer)
        if path == "/webhook":
            envelope = WebhookEnvelope(
                event_kind=headers.get(EVENT_HEADER, ""),
                delivery_id=headers.get(DELIVERY_HEADER, ""),
                signature=headers.get(SIGNATURE_HEADER),
                raw_body=body,
            )
            return self.handle_webhook(envelope)
        params = dict(query)
        params.update(_form_params(headers.get("Content-Type", ""), body))
        return self.handle_auth(params)

    def start(self, host: str | None = None, port: int | None = None) -> "Gateway":
        host = self.config.host if host is None else host
        port = self.config.port if port is None else port
        self._httpd = ThreadingHTTPServer((host, port), _handler_for(self))
        self._httpd.daemon_threads = True
        self._thread = threading.Thread(target=self._httpd.serve_forever, kwargs={"poll_interval": 0.1},
                                        name="gateway", daemon=True)
        self._thread.start()
        logger.info("listening on %s:%d", *self.address)
        return self

    @property
    def address(self) -> tuple[str, int]:
        assert self._httpd is not None
        return self._httpd.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        if host in ("0.0.0.0", ""):
            host = "127.0.0.1"
        return f"http://{host}:{port}"

    def shutdown(self) -> None:
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None


def _bearer(header: str | None) -> str | None:
    if header and header.lower().startswith("bearer "):
        return header[7:].strip() or None
    return None


def _form_params(content_type: str, body: bytes) -> dict[str, str]:
    if not body:
        return {}
    if content_type.startswith("application/x-www-form-urlencoded"):
        return parse_query(body.decode("utf-8", "replace"))
    if content_type.startswith("application/json"):
        try:
            data = json.loads(body)
        except ValueError:
            return {}
        if isinstance(data, dict):
            return {str(k): str(v) for k, v in data.items()}
    return {}


def _handler_for(gateway: Gateway) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "hookrunner"

        def setup(self) -> None:
            super().setup()
            # headers and body go out as separate writes; without this Nagle
            # plus delayed ACK adds ~40ms to every keep-alive response
            self.connection.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

        def _serve(self) -> None:
            length = int(self.headers.get("Content-Length") or 0)
            if length > MAX_BODY:
                self._send(Response(413, {"error": "payload too large"}))
                return
            body = self.rfile.read(length) if length else b""
            try:
                response = gateway.dispatch(self.command, self.path, self.headers, body)
            except Exception:
                logger.exception("handler error for %s %s", self.command, self.path)
                response = Response(500, {"error": "internal error"})
            self._send(response)
            if response.abort and gateway.on_abort:
                gateway.on_abort()

        def _send(self, response: Response) -> None:
            payload, ctype = response.encode()
            self.send_response(response.status)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(payload)))
            for key, value in response.headers.items():
                self.send_header(key, value)
            self.end_headers()
            if self.command != "HEAD":
                self.wfile.write(payload)
            self.wfile.flush()

        do_GET = do_POST = do_PUT = do_PATCH = do_DELETE = do_HEAD = do_OPTIONS = _serve

        def log_message(self, fmt: str, *args: Any) -> None:
            logger.debug("%s %s", self.address_string(), fmt % args)

    return Handler
