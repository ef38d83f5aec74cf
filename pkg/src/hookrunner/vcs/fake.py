"""Filesystem-backed stand-in for a hosted VCS.

A fake repository is a directory::

    <repo>/refs/heads/<branch>   head sha of each branch
    <repo>/commits/<sha>.json    {"parent", "tree": {path: blob sha}, "message", "author"}
    <repo>/blobs/<sha>           file contents

Commit ids are SHA-1 digests of the canonical commit JSON, so they look like git
ids (40 lowercase hex). URLs take the form ``fake://<absolute repo path>``.
"""

from __future__ import annotations

import fcntl
import hashlib
import hmac
import json
import logging
import os
import uuid
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Mapping

import httpx

from ..state import PushEvent
from .base import RepoRef, VcsError, is_checkout, iter_tree_files

logger = logging.getLogger(__name__)

MARKER = ".fakevcs"


def _digest(data: bytes) -> str:
    return hashlib.sha1(data).hexdigest()


class FakeRepo:
    def __init__(self, path: Path) -> None:
        self.path = Path(path)

    @classmethod
    def create(cls, path: Path, branch: str = "main") -> "FakeRepo":
        path = Path(path)
        for sub in ("refs/heads", "commits", "blobs"):
            (path / sub).mkdir(parents=True, exist_ok=True)
        (path / "lock").touch()
        return cls(path)

    def exists(self) -> bool:
        return (self.path / "commits").is_dir()

    @contextmanager
    def locked(self) -> Iterator[None]:
        with open(self.path / "lock", "a+b") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def head(self, branch: str = "main") -> str | None:
        ref = self.path / "refs" / "heads" / branch
        return ref.read_text().strip() if ref.exists() else None

    def commit(self, sha: str) -> dict:
        path = self.path / "commits" / f"{sha}.json"
        if not path.is_file():
            raise VcsError(f"unknown commit {sha} in {self.path}")
        return json.loads(path.read_text())

    def has_commit(self, sha: str) -> bool:
        return len(sha) == 40 and (self.path / "commits" / f"{sha}.json").is_file()

    def blob(self, sha: str) -> bytes:
        return (self.path / "blobs" / sha).read_bytes()

    def tree(self, sha: str | None) -> dict[str, str]:
        return dict(self.commit(sha)["tree"]) if sha else {}

    def read_file(self, path: str, sha: str | None = None, branch: str = "main") -> bytes:
        sha = sha or self.head(branch)
        tree = self.tree(sha)
        if path not in tree:
            raise KeyError(path)
        return self.blob(tree[path])

    def log(self, branch: str = "main") -> list[str]:
        """Commit ids from head back to the root."""
        out = []
        sha = self.head(branch)
        while sha:
            out.append(sha)
            sha = self.commit(sha)["parent"]
        return out

    def write_commit(self, files: Mapping[str, bytes], message: str, author: str, branch: str = "main") -> str:
        """Overlay ``files`` onto the branch head. Caller holds ``locked()``.

        Returns the unchanged head when the overlay changes nothing.
        """
        head = self.head(branch)
        tree = self.tree(head)
        new_tree = dict(tree)
        for rel, data in files.items():
            blob_sha = _digest(data)
            blob_path = self.path / "blobs" / blob_sha
            if not blob_path.exists():
                blob_path.write_bytes(data)
            new_tree[rel] = blob_sha
        if head is not None and new_tree == tree:
            return head
        commit = {"parent": head, "tree": dict(sorted(new_tree.items())), "message": message, "author": author}
        body = json.dumps(commit, sort_keys=True).encode()
        sha = _digest(body)
        (self.path / "commits" / f"{sha}.json").write_bytes(body)
        ref = self.path / "refs" / "heads" / branch
        tmp = ref.with_name(ref.name + ".tmp")
        tmp.write_text(sha + "\n")
        os.replace(tmp, ref)
        return sha


def _clean_workspace(path: Path) -> None:
    """Remove everything except nested checkouts (their contents are theirs)."""
    for entry in path.iterdir():
        if entry.name == MARKER:
            continue
        if entry.is_dir() and not entry.is_symlink():
            if is_checkout(entry):
                continue
            _clean_workspace(entry)
            if not any(entry.iterdir()):
                entry.rmdir()
        else:
            entry.unlink()


class FakeVcsClient:
    SCHEME = "fake://"

    @classmethod
    def repo_for(cls, url: str) -> FakeRepo:
        if not url.startswith(cls.SCHEME):
            raise VcsError(f"not a fake VCS url: {url}")
        repo = FakeRepo(Path(url[len(cls.SCHEME):]))
        if not repo.exists():
            raise VcsError(f"repository not found: {url}")
        return repo

    def pull(self, repo: RepoRef, workspace: Path) -> str:
        fake = self.repo_for(repo.clone_url)
        if repo.head_sha:
            if not fake.has_commit(repo.head_sha):
                raise VcsError(f"commit {repo.head_sha} not found in {repo.clone_url}")
            sha = repo.head_sha
        else:
            sha = fake.head(repo.branch)
            if sha is None:
                raise VcsError(f"ref {repo.ref_name} not found in {repo.clone_url}")
        tree = fake.tree(sha)
        workspace = Path(workspace)
        workspace.mkdir(parents=True, exist_ok=True)
        _clean_workspace(workspace)
        for rel, blob_sha in tree.items():
            dest = workspace / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_bytes(fake.blob(blob_sha))
        (workspace / MARKER).write_text(json.dumps({"url": repo.clone_url, "sha": sha}))
        return sha

    def push(self, subtree: Path, target: RepoRef, message: str) -> str:
        fake = self.repo_for(target.clone_url)
        files = {rel: full.read_bytes() for rel, full in iter_tree_files(Path(subtree))}
        with fake.locked():
            sha = fake.write_commit(files, message, author="hookrunner", branch=target.branch)
        return sha or ""


class FakeVcs(FakeVcsClient):
    """A whole fake hosting service: named repositories under ``root`` plus a
    webhook emitter that POSTs push events for watched repositories."""

    def __init__(
        self,
        root: Path,
        webhook_url: str | None = None,
        secret: str | bytes | None = None,
        timeout: float = 5.0,
    ) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.webhook_url = webhook_url
        self.secret = secret.encode() if isinstance(secret, str) else secret
        self.timeout = timeout
        self.watched: set[str] = set()
        self.responses: list[httpx.Response] = []

    def path_for(self, repo_name: str) -> Path:
        return self.root / repo_name

    def url_for(self, repo_name: str) -> str:
        return self.SCHEME + str(self.path_for(repo_name).resolve())

    def create_repo(self, repo_name: str, watch: bool = False) -> str:
        FakeRepo.create(self.path_for(repo_name))
        if watch:
            self.watched.add(repo_name)
        return self.url_for(repo_name)

    def repo(self, repo_name: str) -> FakeRepo:
        return self.repo_for(self.url_for(repo_name))

    def watch(self, repo_name: str) -> None:
        self.watched.add(repo_name)

    def push_files(
        self,
        repo_name: str,
        files: Mapping[str, bytes | str],
        pusher: str,
        message: str = "update",
        branch: str = "main",
    ) -> PushEvent | None:
        """Commit ``files`` as ``pusher`` and, for a watched repo, deliver a push webhook.

        Returns the emitted event, or None when the repo is not watched.
        """
        if not self.path_for(repo_name).is_dir():
            raise VcsError(f"unknown repository {repo_name}")
        repo = self.repo(repo_name)
        data = {k: v.encode() if isinstance(v, str) else v for k, v in files.items()}
        with repo.locked():
            before = repo.head(branch)
            after = repo.write_commit(data, message, author=pusher, branch=branch)
        if repo_name not in self.watched or not self.webhook_url:
            return None
        event = PushEvent(
            repo_name=repo_name,
            clone_url=self.url_for(repo_name),
            ref_name=f"refs/heads/{branch}",
            head_sha=after,
            pusher=pusher,
            delivery_id=str(uuid.uuid4()),
        )
        self._emit(event, before)
        return event

    def _emit(self, event: PushEvent, before: str | None) -> None:
        payload = {
            "ref": event.ref_name,
            "before": before or "0" * 40,
            "after": event.head_sha,
            "repository": {"full_name": event.repo_name, "clone_url": event.clone_url},
            "pusher": {"name": event.pusher},
        }
        body = json.dumps(payload).encode()
        headers = {
            "Content-Type": "application/json",
            "X-GitHub-Event": "push",
            "X-GitHub-Delivery": event.delivery_id,
        }
        if self.secret:
            headers["X-Hub-Signature-256"] = "sha256=" + hmac.new(self.secret, body, hashlib.sha256).hexdigest()
        resp = httpx.post(self.webhook_url, content=body, headers=headers, timeout=self.timeout)
        logger.debug("webhook for %s -> %s", event.repo_name, resp.status_code)
        self.responses.append(resp)
