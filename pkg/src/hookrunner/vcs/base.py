from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

# Directory entries that belong to a checkout's bookkeeping, never to its tree.
CHECKOUT_MARKERS = (".git", ".fakevcs")


class VcsError(RuntimeError):
    pass


@dataclass(frozen=True)
class RepoRef:
    clone_url: str
    ref_name: str = "refs/heads/main"
    head_sha: str | None = None

    @property
    def branch(self) -> str:
        prefix = "refs/heads/"
        return self.ref_name[len(prefix):] if self.ref_name.startswith(prefix) else self.ref_name


def is_checkout(path: Path) -> bool:
    return any((path / marker).exists() for marker in CHECKOUT_MARKERS)


def iter_tree_files(root: Path) -> Iterator[tuple[str, Path]]:
    """Yield (posix relative path, absolute path) for every regular file under
    ``root``, skipping checkout bookkeeping and nested checkouts."""
    root = Path(root)
    for dirpath, dirnames, filenames in os.walk(root):
        here = Path(dirpath)
        dirnames[:] = sorted(
            d for d in dirnames
            if d not in CHECKOUT_MARKERS and not is_checkout(here / d)
        )
        for name in sorted(filenames):
            if name in CHECKOUT_MARKERS:
                continue
            full = here / name
            if full.is_symlink() or not full.is_file():
                continue
            yield full.relative_to(root).as_posix(), full
