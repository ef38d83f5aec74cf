"""Git driver that shells out to the ``git`` executable."""

from __future__ import annotations

import logging
import os
import shutil
import subprocess
import tempfile
import uuid
from pathlib import Path

from .base import RepoRef, VcsError, iter_tree_files

logger = logging.getLogger(__name__)


class GitVcs:
    """Pull/push through git subprocesses.

    A push token (``token`` or ``$VCS_TOKEN``) is passed to git through
    ``GIT_CONFIG_*`` environment variables, never as a command-line argument.
    """

    def __init__(self, token: str | None = None, git: str = "git", identity: str = "hookrunner") -> None:
        self.git = git
        self.token = token if token is not None else os.environ.get("VCS_TOKEN")
        self.identity = identity

    def _env(self) -> dict[str, str]:
        env = dict(os.environ)
        env.update({
            "GIT_TERMINAL_PROMPT": "0",
            "GIT_AUTHOR_NAME": self.identity,
            "GIT_AUTHOR_EMAIL": f"{self.identity}@localhost",
            "GIT_COMMITTER_NAME": self.identity,
            "GIT_COMMITTER_EMAIL": f"{self.identity}@localhost",
        })
        if self.token:
            env.update({
                "GIT_CONFIG_COUNT": "1",
                "GIT_CONFIG_KEY_0": "http.extraHeader",
                "GIT_CONFIG_VALUE_0": f"Authorization: Bearer {self.token}",
            })
        return env

    def run(self, *args: str, cwd: Path | None = None, check: bool = True) -> subprocess.CompletedProcess:
        proc = subprocess.run(
            [self.git, *args],
            cwd=cwd,
            env=self._env(),
            capture_output=True,
            text=True,
        )
        if check and proc.returncode != 0:
            raise VcsError(f"git {' '.join(args)} failed: {proc.stderr.strip()}")
        return proc

    def _resolve(self, checkout: Path, repo: RepoRef) -> str:
        if repo.head_sha:
            probe = self.run("cat-file", "-e", f"{repo.head_sha}^{{commit}}", cwd=checkout, check=False)
            if probe.returncode != 0:
                raise VcsError(f"commit {repo.head_sha} not found in {repo.clone_url}")
            return repo.head_sha
        probe = self.run("rev-parse", "--verify", "--quiet", f"refs/remotes/origin/{repo.branch}^{{commit}}",
                         cwd=checkout, check=False)
        if probe.returncode != 0:
            raise VcsError(f"ref {repo.ref_name} not found in {repo.clone_url}")
        return probe.stdout.strip()

    def _origin(self, workspace: Path) -> str | None:
        if not (workspace / ".git").exists():
            return None
        proc = self.run("remote", "get-url", "origin", cwd=workspace, check=False)
        return proc.stdout.strip() if proc.returncode == 0 else None

    def pull(self, repo: RepoRef, workspace: Path) -> str:
        workspace = Path(workspace)
        if self._origin(workspace) == repo.clone_url:
            self.run("fetch", "--quiet", "--prune", "origin", "+refs/heads/*:refs/remotes/origin/*", cwd=workspace)
            sha = self._resolve(workspace, repo)
            self.run("checkout", "--quiet", "--force", "--detach", sha, cwd=workspace)
            # single -f leaves nested checkouts (e.g. a sync repo) alone
            self.run("clean", "-fdxq", cwd=workspace)
            return sha

        workspace.parent.mkdir(parents=True, exist_ok=True)
        tmp = workspace.parent / f".{workspace.name}.clone-{uuid.uuid4().hex[:8]}"
        try:
            self.run("clone", "--quiet", "--no-checkout", repo.clone_url, str(tmp))
            sha = self._resolve(tmp, repo)
            self.run("checkout", "--quiet", "--force", "--detach", sha, cwd=tmp)
        except VcsError:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        if workspace.exists():
            shutil.rmtree(workspace)
        tmp.rename(workspace)
        return sha

    def push(self, subtree: Path, target: RepoRef, message: str) -> str:
        branch = target.branch
        with tempfile.TemporaryDirectory(prefix="hookrunner-push-") as tmpdir:
            work = Path(tmpdir) / "w"
            self.run("clone", "--quiet", target.clone_url, str(work))
            has_branch = self.run("rev-parse", "--verify", "--quiet", f"refs/remotes/origin/{branch}",
                                  cwd=work, check=False).returncode == 0
            if has_branch:
                self.run("checkout", "--quiet", "-B", branch, f"origin/{branch}", cwd=work)
            else:
                self.run("checkout", "--quiet", "--orphan", branch, cwd=work)

            for rel, full in iter_tree_files(Path(subtree)):
                dest = work / rel
                dest.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(full, dest)
            self.run("add", "-A", cwd=work)
            if not self.run("status", "--porcelain", cwd=work).stdout.strip():
                head = self.run("rev-parse", "--verify", "--quiet", "HEAD", cwd=work, check=False)
                return head.stdout.strip()
            self.run("commit", "--quiet", "-m", message, cwd=work)

            if self.run("push", "--quiet", "origin", f"HEAD:refs/heads/{branch}", cwd=work, check=False).returncode:
                logger.info("push to %s rejected, rebasing once", target.clone_url)
                self.run("pull", "--quiet", "--rebase", "origin", branch, cwd=work)
                self.run("push", "--quiet", "origin", f"HEAD:refs/heads/{branch}", cwd=work)
            return self.run("rev-parse", "HEAD", cwd=work).stdout.strip()

    # Helpers for seeding local bare repositories (tests, demos).

    def init_bare(self, path: Path, branch: str = "main") -> str:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.run("init", "--quiet", "--bare", "-b", branch, str(path))
        return str(path)

    def commit_files(self, clone_url: str, files: dict[str, bytes | str], message: str = "update",
                     branch: str = "main") -> str:
        with tempfile.TemporaryDirectory(prefix="hookrunner-seed-") as tmpdir:
            src = Path(tmpdir)
            for rel, data in files.items():
                dest = src / rel
                dest.parent.mkdir(parents=True, exist_ok=True)
                dest.write_bytes(data.encode() if isinstance(data, str) else data)
            return self.push(src, RepoRef(clone_url, f"refs/heads/{branch}"), message)
