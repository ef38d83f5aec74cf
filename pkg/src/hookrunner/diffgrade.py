"""Compare a submitted program against a reference solution on shared inputs.

Each input case is fed to both programs on stdin; their stdout is normalized
and compared line by line. The overall exit code is 0 only when every case
matches, so a grading run can be used directly as a job command.
"""

from __future__ import annotations

import difflib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .executor import SAFE_PATH, run_command

NORMALIZERS = ("exact", "strip-trailing-whitespace")


@dataclass(frozen=True)
class DiffGradeSpec:
    student_command: Sequence[str]
    gold_command: Sequence[str]
    input_cases: Sequence[bytes]
    normalize: str = "exact"
    timeout_seconds: float = 60.0

    def __post_init__(self) -> None:
        if not self.student_command or not self.gold_command:
            raise ValueError("student_command and gold_command must be non-empty")
        if not self.input_cases:
            raise ValueError("at least one input case is required")
        if self.normalize not in NORMALIZERS:
            raise ValueError(f"normalize must be one of {NORMALIZERS}, got {self.normalize!r}")

    @classmethod
    def from_dict(cls, data: dict[str, Any], base_dir: Path | None = None) -> "DiffGradeSpec":
        """Build from JSON. Cases come from ``input_cases`` (strings) and/or
        ``input_files`` (paths relative to ``base_dir``)."""
        cases: list[bytes] = [c.encode() for c in data.get("input_cases", [])]
        for name in data.get("input_files", []):
            path = Path(name)
            if not path.is_absolute() and base_dir is not None:
                path = base_dir / path
            cases.append(path.read_bytes())
        return cls(
            student_command=tuple(data["student_command"]),
            gold_command=tuple(data["gold_command"]),
            input_cases=tuple(cases),
            normalize=data.get("normalize", "exact"),
            timeout_seconds=float(data.get("timeout_seconds", 60.0)),
        )

    def swapped(self) -> "DiffGradeSpec":
        return DiffGradeSpec(self.gold_command, self.student_command, self.input_cases,
                             self.normalize, self.timeout_seconds)


@dataclass(frozen=True)
class CaseResult:
    index: int
    match: bool
    diff: str
    error: str | None = None


@dataclass(frozen=True)
class DiffReport:
    cases: tuple[CaseResult, ...] = field(default_factory=tuple)

    @property
    def all_match(self) -> bool:
        return all(c.match for c in self.cases)

    @property
    def exit_code(self) -> int:
        return 0 if self.all_match else 1

    def to_json(self) -> dict[str, Any]:
        cases = []
        for c in self.cases:
            entry: dict[str, Any] = {"index": c.index, "match": c.match, "diff": c.diff}
            if c.error is not None:
                entry["error"] = c.error
            cases.append(entry)
        return {"cases": cases, "all_match": self.all_match}

    def to_text(self) -> str:
        lines = []
        for c in self.cases:
            verdict = "ok" if c.match else ("ERROR" if c.error else "MISMATCH")
            lines.append(f"case {c.index}: {verdict}" + (f" ({c.error})" if c.error else ""))
            if c.diff:
                lines.append(c.diff.rstrip("\n"))
        passed = sum(c.match for c in self.cases)
        lines.append(f"{passed}/{len(self.cases)} cases match")
        return "\n".join(lines) + "\n"


def normalize_output(data: bytes, mode: str) -> list[str]:
    lines = data.decode("utf-8", "replace").splitlines()
    if mode == "strip-trailing-whitespace":
        lines = [line.rstrip() for line in lines]
        while lines and not lines[-1]:
            lines.pop()
    return lines


def _run(command: Sequence[str], workspace: Path, stdin: bytes, timeout: float) -> tuple[bytes | None, str | None]:
    env = {"PATH": os.environ.get("PATH", SAFE_PATH), "LANG": "C.UTF-8", "HOME": str(workspace)}
    try:
        result = run_command(command, workspace, env, timeout, stdin=stdin)
    except OSError as exc:
        return None, f"failed to start {command[0]}: {exc.strerror or exc}"
    if result.timed_out:
        return None, f"{command[0]} timed out"
    return result.stdout, None


def run_diff_grade(spec: DiffGradeSpec, workspace: Path) -> DiffReport:
    """Run every case. The timeout budget is split evenly over cases and, within
    a case, over the two programs."""
    workspace = Path(workspace)
    per_command = spec.timeout_seconds / (2 * len(spec.input_cases))
    results = []
    for index, case in enumerate(spec.input_cases):
        gold, gold_err = _run(spec.gold_command, workspace, case, per_command)
        student, student_err = _run(spec.student_command, workspace, case, per_command)
        error = gold_err or student_err
        if error:
            results.append(CaseResult(index, False, "", error))
            continue
        diff = "\n".join(difflib.unified_diff(
            normalize_output(gold, spec.normalize),
            normalize_output(student, spec.normalize),
            fromfile="gold",
            tofile="student",
            lineterm="",
        ))
        results.append(CaseResult(index, not diff, diff + "\n" if diff else ""))
    return DiffReport(tuple(results))


def write_reports(report: DiffReport, json_path: Path | None, text_path: Path | None) -> None:
    if json_path is not None:
        Path(json_path).write_text(json.dumps(report.to_json(), indent=2) + "\n")
    if text_path is not None:
        Path(text_path).write_text(report.to_text())
