import hashlib
import json
import threading
import time
from urllib.parse import parse_qsl

import httpx
import pytest
from hypothesis import given, strategies as st

from hookrunner.executor import JobSpec
from hookrunner.gateway import ROUTES, PayloadError, parse_push_event, parse_query, verify_signature
from hookrunner.loadgen import identity_holds, percentile, push_payload, webhook_headers

from conftest import sleep_cmd, wait_until

SHA = "b" * 40
METHODS = ["GET", "HEAD", "POST", "PUT", "PATCH", "DELETE", "OPTIONS"]


def reference_hmac_sha256(key: bytes, msg: bytes) -> str:
    """Textbook HMAC built only on hashlib.sha256, used as an independent oracle."""
    block = 64
    if len(key) > block:
        key = hashlib.sha256(key).digest()
    key = key.ljust(block, b"\0")
    inner = hashlib.sha256(bytes(k ^ 0x36 for k in key) + msg).digest()
    return hashlib.sha256(bytes(k ^ 0x5C for k in key) + inner).hexdigest()


# parse_query ----------------------------------------------------------------

def test_parse_query_examples():
    assert parse_query("name=jack&grade=100") == {"name": "jack", "grade": "100"}
    assert parse_query("name=jack&&grade=100") == {"name": "jack", "grade": "100"}
    assert parse_query("") == {}
    assert parse_query("a=1&a=2") == {"a": "2"}
    assert parse_query("x=a%20b&y=c+d&k%3D=v=w") == {"x": "a b", "y": "c d", "k=": "v=w"}


@given(st.lists(st.tuples(st.text(min_size=1, max_size=6), st.text(max_size=6)), max_size=6),
       st.lists(st.integers(0, 3), max_size=6))
def test_parse_query_matches_stdlib(pairs, gaps):
    from urllib.parse import quote_plus
    segments = []
    for i, (k, v) in enumerate(pairs):
        segments.append(f"{quote_plus(k)}={quote_plus(v)}")
        segments.extend([""] * (gaps[i] if i < len(gaps) else 0))
    raw = "&".join(segments)
    expected = dict(parse_qsl(raw, keep_blank_values=True))
    assert parse_query(raw) == expected


# verify_signature -------------------------------------------------------------

@given(st.binary(max_size=100), st.binary(max_size=300))
def test_signature_matches_reference(secret, body):
    assert verify_signature(secret, body, reference_hmac_sha256(secret, body))


def test_signature_rejects_bad_input():
    tag = reference_hmac_sha256(b"k", b"body")
    assert not verify_signature(b"k", b"other", tag)
    assert not verify_signature(b"k", b"body", "")
    assert not verify_signature(b"k", b"body", "zz" * 32)
    assert not verify_signature(b"k", b"body", tag[:-2])


# parse_push_event -------------------------------------------------------------

def test_parse_push_event_verbatim():
    body = push_payload("course/alice", SHA, clone_url="fake:///course/alice", pusher="alice")
    ev = parse_push_event(body, "d-1")
    assert (ev.repo_name, ev.clone_url, ev.ref_name, ev.head_sha, ev.pusher, ev.delivery_id) == (
        "course/alice", "fake:///course/alice", "refs/heads/main", SHA, "alice", "d-1")


def test_parse_push_event_missing_field():
    data = json.loads(push_payload("o/r", SHA))
    del data["after"]
    with pytest.raises(PayloadError, match="missing field: after"):
        parse_push_event(json.dumps(data).encode())
    del data["pusher"]["name"]
    data["after"] = SHA
    with pytest.raises(PayloadError, match="missing field: pusher.name"):
        parse_push_event(json.dumps(data).encode())


def test_parse_push_event_tolerates_extras():
    data = json.loads(push_payload("o/r", SHA))
    data["commits"] = [{"id": SHA}]
    data["repository"]["private"] = True
    assert parse_push_event(json.dumps(data).encode()).head_sha == SHA


def test_parse_push_event_malformed():
    with pytest.raises(PayloadError):
        parse_push_event(b"{not json")


# HTTP -------------------------------------------------------------------------

@pytest.fixture
def client():
    with httpx.Client(timeout=5) as c:
        yield c


def sleep_job(seconds, **kw):
    return JobSpec("sleep", sleep_cmd(seconds), **kw)


def trigger(client, server, token="tok-alice", **params):
    headers = {"Authorization": f"Bearer {token}"} if token else {}
    return client.get(server.url + "/trigger", params=params, headers=headers)


def test_ping_and_route_matrix(make_config, start_server, client):
    server = start_server(make_config())
    r = client.get(server.url + "/ping")
    assert r.status_code == 200 and r.text == "pong"
    for path, allowed in ROUTES.items():
        for method in METHODS:
            r = client.request(method, server.url + path)
            assert (r.status_code != 405) == (method in allowed), (method, path, r.status_code)
    assert ROUTES["/auth"] == frozenset(METHODS)
    assert client.get(server.url + "/nope").status_code == 404


def test_status_fresh_and_queued(make_config, start_server, client):
    server = start_server(make_config(), worker_count=0)
    body = client.get(server.url + "/status").json()
    assert body["queue_depth"] == 0 and body["last_executed"] is None
    for _ in range(3):
        assert trigger(client, server, clone_url="fake:///x").status_code == 202
    body = client.get(server.url + "/status").json()
    assert body["queue_depth"] == 3 and identity_holds(body)


def test_trigger(make_config, start_server, client):
    server = start_server(make_config(queue_capacity=2), worker_count=0)
    r = client.get(server.url + "/trigger/?a=1&&b=2&clone_url=fake:///x",
                   headers={"Authorization": "Bearer tok-alice"})
    assert r.status_code == 202
    task_id = r.json()["task_id"]
    assert r.json()["queued"] is True
    (task,) = server.queue.pending()
    assert task.task_id == task_id
    assert task.params["a"] == "1" and task.params["b"] == "2"
    assert task.submitter == "alice" and task.job_name == "noop"

    assert trigger(client, server, token=None, clone_url="fake:///x").status_code == 401
    assert trigger(client, server, token="wrong", clone_url="fake:///x").status_code == 401
    assert trigger(client, server, job="missing", clone_url="fake:///x").status_code == 400
    assert server.queue.size() == 1

    assert trigger(client, server, clone_url="fake:///x").status_code == 202
    r = trigger(client, server, clone_url="fake:///x")
    assert r.status_code == 503 and "error" in r.json()
    assert client.get(server.url + "/status").json()["rejected"] == 1
    assert client.get(server.url + "/ping").text == "pong"


def test_webhook_flow(make_config, start_server, client, fake_vcs):
    config = make_config(jobs=[JobSpec("grade", ["true"], repo_match="course/*")], webhook_secret="s3cret")
    server = start_server(config, worker_count=0)
    url = server.url + "/webhook"
    body = push_payload("course/alice", SHA, clone_url="fake:///x")

    r = client.post(url, content=body, headers=webhook_headers(body, "s3cret", "d-1"))
    assert r.status_code == 202
    (task,) = server.queue.pending()
    assert task.head_sha == SHA and task.task_id == r.json()["task_id"]

    # redelivery of the same id
    r = client.post(url, content=body, headers=webhook_headers(body, "s3cret", "d-1"))
    assert r.status_code == 200 and r.json() == {"duplicate": True}

    headers = webhook_headers(body, "s3cret", "d-2")
    headers["X-GitHub-Event"] = "star"
    assert client.post(url, content=body, headers=headers).json() == {"ignored": True}

    other = push_payload("elsewhere/bob", SHA)
    assert client.post(url, content=other, headers=webhook_headers(other, "s3cret")).json() == {"ignored": True}

    bad = b"{oops"
    assert client.post(url, content=bad, headers=webhook_headers(bad, "s3cret")).status_code == 400

    parses = server.gateway.parse_count
    headers = webhook_headers(body, "s3cret")
    assert client.post(url, content=body + b" ", headers=headers).status_code == 401
    headers.pop("X-Hub-Signature-256")
    assert client.post(url, content=body, headers=headers).status_code == 401
    assert server.gateway.parse_count == parses
    assert server.queue.size() == 1


def test_webhook_full_queue(make_config, start_server, client):
    server = start_server(make_config(queue_capacity=1), worker_count=0)
    codes = []
    for i in range(2):
        body = push_payload("o/r", f"{i:040x}", clone_url="fake:///x")
        codes.append(client.post(server.url + "/webhook", content=body, headers=webhook_headers(body, None)).status_code)
    assert codes == [202, 503]
    snap = server.state.snapshot()
    assert (snap.accepted_total, snap.rejected_total) == (1, 1)


def test_dedupe_head_sha(make_config, start_server, client):
    server = start_server(make_config(dedupe_head_sha=True), worker_count=0)
    body = push_payload("o/r", SHA, clone_url="fake:///x")
    r1 = client.post(server.url + "/webhook", content=body, headers=webhook_headers(body, None))
    r2 = client.post(server.url + "/webhook", content=body, headers=webhook_headers(body, None))
    assert (r1.status_code, r2.status_code) == (202, 200)
    assert r2.json() == {"duplicate": True}


def test_auth_any_method(make_config, start_server, client):
    server = start_server(make_config())
    r = client.get(server.url + "/auth", params={"code": "K"})
    assert r.status_code == 200 and r.json()["subject"] == "jack"
    r = client.post(server.url + "/auth", data={"code": "K"})
    assert r.status_code == 200 and r.json()["subject"] == "jack"
    r = client.put(server.url + "/auth", json={"code": "K"})
    assert r.status_code == 200
    assert client.get(server.url + "/auth", params={"code": "nope"}).status_code == 401

    token = client.get(server.url + "/auth", params={"code": "K"}).json()["token"]
    r = client.get(server.url + "/queue", headers={"Authorization": f"Bearer {token}"})
    assert r.status_code == 200 and r.json() == []


def test_expired_token(make_config, start_server, client):
    server = start_server(make_config(token_ttl_seconds=1))
    token = server.gateway.tokens.issue("jack").bearer
    assert client.get(server.url + "/queue", headers={"Authorization": f"Bearer {token}"}).status_code == 200
    time.sleep(1.1)
    assert client.get(server.url + "/queue", headers={"Authorization": f"Bearer {token}"}).status_code == 401


def test_queue_filtered_by_subject(make_config, start_server, client, fake_vcs):
    fake_vcs.create_repo("o/r")
    fake_vcs.push_files("o/r", {"a": "1"}, "x")
    server = start_server(make_config(jobs=[sleep_job(1)], worker_count=2))
    url = fake_vcs.url_for("o/r")
    assert trigger(client, server, "tok-alice", clone_url=url).status_code == 202
    assert trigger(client, server, "tok-bob", clone_url=url).status_code == 202
    assert wait_until(lambda: server.state.snapshot().in_flight == 2)

    def mine(token):
        return client.get(server.url + "/queue", headers={"Authorization": f"Bearer {token}"}).json()
    alice, bob, ta = mine("tok-alice"), mine("tok-bob"), mine("tok-ta")
    assert [s["submitter"] for s in alice] == ["alice"] and alice[0]["phase"] == "executing"
    assert [s["submitter"] for s in bob] == ["bob"]
    assert ta == []
    assert client.get(server.url + "/queue").status_code == 401


def test_status_stays_fast_during_long_task(make_config, start_server, client, fake_vcs):
    fake_vcs.create_repo("o/r")
    fake_vcs.push_files("o/r", {"a": "1"}, "x")
    server = start_server(make_config(jobs=[sleep_job(5)]))
    assert trigger(client, server, clone_url=fake_vcs.url_for("o/r")).status_code == 202
    assert wait_until(lambda: server.state.snapshot().in_flight == 1)
    latencies = []
    for _ in range(200):
        t0 = time.perf_counter()
        r = client.get(server.url + "/status")
        latencies.append((time.perf_counter() - t0) * 1000)
        assert r.status_code == 200
    assert server.state.snapshot().in_flight == 1
    assert percentile(latencies, 99) < 50


def test_concurrent_status_all_consistent(make_config, start_server, fake_vcs):
    fake_vcs.create_repo("o/r")
    fake_vcs.push_files("o/r", {"a": "1"}, "x")
    server = start_server(make_config(jobs=[JobSpec("noop", ["true"])], worker_count=2, queue_capacity=64))
    url = fake_vcs.url_for("o/r")
    bodies, errors = [], []

    def poll():
        with httpx.Client(timeout=5) as c:
            try:
                bodies.append(c.get(server.url + "/status").json())
            except Exception as exc:  # pragma: no cover
                errors.append(exc)

    with httpx.Client(timeout=5) as c:
        for _ in range(10):
            trigger(c, server, clone_url=url)
    threads = [threading.Thread(target=poll) for _ in range(50)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors and len(bodies) == 50
    assert all(identity_holds(b) for b in bodies)
