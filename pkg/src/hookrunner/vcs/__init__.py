"""Version-control clients: a git subprocess driver and a filesystem fake.

Both expose the same two operations::

    pull(repo: RepoRef, workspace: Path) -> str   # checked-out sha
    push(subtree: Path, target: RepoRef, message: str) -> str  # new head sha

``AutoVcs`` routes ``fake://`` URLs to the fake and everything else to git.
"""

from __future__ import annotations

from pathlib import Path
from typing import Protocol

from .base import RepoRef, VcsError, iter_tree_files
from .fake import FakeVcs, FakeVcsClient
from .git import GitVcs

__all__ = ["AutoVcs", "FakeVcs", "FakeVcsClient", "GitVcs", "RepoRef", "VcsClient", "VcsError", "iter_tree_files"]


class VcsClient(Protocol):
    def pull(self, repo: RepoRef, workspace: Path) -> str: ...

    def push(self, subtree: Path, target: RepoRef, message: str) -> str: ...


class AutoVcs:
    def __init__(self, git: GitVcs | None = None, fake: FakeVcsClient | None = None) -> None:
        self.git = git or GitVcs()
        self.fake = fake or FakeVcsClient()

    def _pick(self, url: str) -> VcsClient:
        return self.fake if url.startswith(FakeVcsClient.SCHEME) else self.git

    def pull(self, repo: RepoRef, workspace: Path) -> str:
        return self._pick(repo.clone_url).pull(repo, workspace)

    def push(self, subtree: Path, target: RepoRef, message: str) -> str:
        return self._pick(target.clone_url).push(subtree, target, message)
