"""Typed per-run feedback: verdict, stdio, coverage, sanitizer reports.

Freeform channels (stdout/stderr, traces, campaign extras) are stored raw
and wrapped in sentinel delimiters only at template-binding time, so target
output that mimics structure can never be parsed as instructions.  Typed
channels (verdict, coverage, sanitizer reports) pass through their canonical
serializations.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Collection, Iterable, NamedTuple

from .errors import ParseError

# Error classes recognized out of the box; parse_sanitizer accepts extras.
DEFAULT_SANITIZER_KINDS = frozenset(
    {
        "heap-buffer-overflow",
        "stack-buffer-overflow",
        "use-after-free",
        "integer-overflow",
        "null-dereference",
        "out-of-bounds-read",
    }
)

_FRAME_RE = re.compile(r"^\s*#(\d+)\s+(\S+)\s+(\S+):(\d+)\s*$")
_ERROR_RE = re.compile(r"^ERROR:\s*(\S+)")


@dataclass(frozen=True)
class StackFrame:
    function: str
    file: str
    line: int


@dataclass(frozen=True)
class SanitizerReport:
    kind: str
    frames: tuple[StackFrame, ...]
    raw: str

    def __post_init__(self) -> None:
        if not self.frames:
            raise ValueError("sanitizer report must carry at least one frame")


@dataclass(frozen=True, order=True)
class CrashSignature:
    """Deduplication key: error class plus the call site's function and file.

    Line numbers are deliberately excluded; line-level keys over-split
    across trivial recompiles.
    """

    kind: str
    function: str
    file: str

    def __str__(self) -> str:
        return f"{self.kind}@{self.function}({self.file})"


@dataclass(frozen=True)
class CoverageMap:
    """Executed line numbers per file; serialization is sorted, so equal maps
    serialize identically."""

    per_file: dict[str, frozenset[int]] = field(default_factory=dict)

    @staticmethod
    def from_pairs(pairs: Iterable[tuple[str, int]]) -> CoverageMap:
        acc: dict[str, set[int]] = {}
        for file, line in pairs:
            acc.setdefault(file, set()).add(line)
        return CoverageMap({f: frozenset(s) for f, s in acc.items()})

    def covers(self, file: str, line: int) -> bool:
        return line in self.per_file.get(file, frozenset())

    def lines(self) -> frozenset[tuple[str, int]]:
        return frozenset(
            (f, ln) for f, lines in self.per_file.items() for ln in lines
        )

    def merge(self, other: CoverageMap) -> CoverageMap:
        return CoverageMap.from_pairs(list(self.lines()) + list(other.lines()))

    def serialize(self) -> str:
        return "\n".join(f"{f}:{ln}" for f, ln in sorted(self.lines()))


@dataclass(frozen=True)
class BranchMap:
    """Conditional branch outcomes per file as (line, taken) pairs."""

    per_file: dict[str, frozenset[tuple[int, bool]]] = field(default_factory=dict)

    @staticmethod
    def from_records(records: Iterable[tuple[str, int, bool]]) -> BranchMap:
        acc: dict[str, set[tuple[int, bool]]] = {}
        for file, line, taken in records:
            acc.setdefault(file, set()).add((line, taken))
        return BranchMap({f: frozenset(s) for f, s in acc.items()})

    def records(self) -> frozenset[tuple[str, int, bool]]:
        return frozenset(
            (f, ln, taken) for f, rs in self.per_file.items() for ln, taken in rs
        )

    def took(self, file: str, line: int) -> bool:
        return (line, True) in self.per_file.get(file, frozenset())

    def merge(self, other: BranchMap) -> BranchMap:
        return BranchMap.from_records(list(self.records()) + list(other.records()))

    def serialize(self) -> str:
        return "\n".join(
            f"{f}:{ln}:{'T' if taken else 'F'}" for f, ln, taken in sorted(self.records())
        )


@dataclass(frozen=True)
class FeedbackBundle:
    """Everything one run of the target produced, as a typed value."""

    outcome: str = "none"  # pass | fail | none
    stdout: str = ""
    stderr: str = ""
    cov: CoverageMap | None = None
    branch: BranchMap | None = None
    san: tuple[SanitizerReport, ...] = ()
    traces: dict[str, str] = field(default_factory=dict)
    extra: dict[str, str] = field(default_factory=dict)

    def channels(self) -> frozenset[str]:
        present = {"stdout", "stderr", "san"}
        if self.outcome != "none":
            present.add("outcome")
        if self.cov is not None:
            present.add("cov")
        if self.branch is not None:
            present.add("branch")
        if self.traces:
            present.add("trace")
        present.update(self.extra)
        return frozenset(present)

    def canonical_text(self) -> str:
        parts = [
            f"outcome={self.outcome}",
            f"stdout={self.stdout!r}",
            f"stderr={self.stderr!r}",
            "cov=" + ("-" if self.cov is None else self.cov.serialize()),
            "branch=" + ("-" if self.branch is None else self.branch.serialize()),
            "san=" + "\n".join(r.raw for r in self.san),
            "traces=" + json.dumps(self.traces, sort_keys=True),
            "extra=" + json.dumps(self.extra, sort_keys=True),
        ]
        return "\n".join(parts)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]


# -- sanitizer report parsing ----------------------------------------------

def parse_sanitizer(
    text: str | bytes, kinds: frozenset[str] = DEFAULT_SANITIZER_KINDS
) -> list[SanitizerReport]:
    """Extract every report block from canonical sanitizer text.

    A block starts at a line beginning with ``ERROR:`` and runs to an ``END``
    line (or the next block / end of input).  Blocks that cannot be decoded
    into a registered kind with at least one frame come back as kind
    ``unknown`` with the raw text preserved.
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"undecodable sanitizer text: {exc}") from None
    blocks: list[list[str]] = []
    current: list[str] | None = None
    for line in text.splitlines():
        if _ERROR_RE.match(line.strip()):
            current = [line]
            blocks.append(current)
        elif current is not None:
            current.append(line)
            if line.strip() == "END":
                current = None
    reports = []
    for block in blocks:
        raw = "\n".join(block)
        m = _ERROR_RE.match(block[0].strip())
        kind = m.group(1) if m else "unknown"
        frames = []
        for line in block[1:]:
            fm = _FRAME_RE.match(line)
            if fm:
                frames.append(StackFrame(fm.group(2), fm.group(3), int(fm.group(4))))
        if not frames or kind not in kinds:
            reports.append(
                SanitizerReport(
                    kind="unknown", frames=(StackFrame("??", "??", 0),), raw=raw
                )
            )
        else:
            reports.append(SanitizerReport(kind=kind, frames=tuple(frames), raw=raw))
    return reports


def signature(
    report: SanitizerReport, source_files: Collection[str] | str | None = None
) -> CrashSignature:
    """Project a report onto its dedup key.

    ``source_files`` restricts the site to the first frame inside the target
    source root (a file-id collection, or a path prefix); without it, or when
    no frame matches, the topmost frame wins.
    """
    frame = report.frames[0]
    if source_files is not None:
        for f in report.frames:
            if isinstance(source_files, str):
                if f.file.startswith(source_files):
                    frame = f
                    break
            elif f.file in source_files:
                frame = f
                break
    return CrashSignature(kind=report.kind, function=frame.function, file=frame.file)


class UniqueCrashes(NamedTuple):
    count: int
    signatures: frozenset[CrashSignature]


def unique_crashes(
    bundles: Iterable[FeedbackBundle],
    source_files: Collection[str] | str | None = None,
) -> UniqueCrashes:
    """Distinct crash signatures over all sanitizer reports in all bundles.

    Three reports of the same crash count once; report order never matters.
    """
    sigs = frozenset(
        signature(r, source_files) for b in bundles for r in b.san
    )
    return UniqueCrashes(count=len(sigs), signatures=sigs)


# -- bundle archives -----------------------------------------------------------

BUNDLE_MAGIC = "aflow-bundles"
BUNDLE_VERSION = 1


def _bundle_to_dict(b: FeedbackBundle) -> dict:
    return {
        "outcome": b.outcome,
        "stdout": b.stdout,
        "stderr": b.stderr,
        "cov": None if b.cov is None else sorted(b.cov.lines()),
        "branch": None if b.branch is None else sorted(b.branch.records()),
        "san": [
            {"kind": r.kind, "frames": [[f.function, f.file, f.line] for f in r.frames], "raw": r.raw}
            for r in b.san
        ],
        "traces": b.traces,
        "extra": b.extra,
    }


def _bundle_from_dict(d: dict) -> FeedbackBundle:
    return FeedbackBundle(
        outcome=d["outcome"],
        stdout=d["stdout"],
        stderr=d["stderr"],
        cov=None if d["cov"] is None else CoverageMap.from_pairs(tuple(p) for p in d["cov"]),
        branch=None
        if d["branch"] is None
        else BranchMap.from_records(tuple(r) for r in d["branch"]),
        san=tuple(
            SanitizerReport(
                kind=r["kind"],
                frames=tuple(StackFrame(*f) for f in r["frames"]),
                raw=r["raw"],
            )
            for r in d["san"]
        ),
        traces=dict(d["traces"]),
        extra=dict(d["extra"]),
    )


def write_bundle_archive(path, bundles: dict[str, FeedbackBundle]) -> None:
    """Persist per-task bundles; line 1 is the magic+version header."""
    from pathlib import Path

    lines = [f"{BUNDLE_MAGIC} {BUNDLE_VERSION}"]
    for task_id in sorted(bundles):
        lines.append(
            json.dumps({"task": task_id, "bundle": _bundle_to_dict(bundles[task_id])},
                       sort_keys=True)
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_bundle_archive(path) -> dict[str, FeedbackBundle]:
    from pathlib import Path

    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split() != [BUNDLE_MAGIC, str(BUNDLE_VERSION)]:
        raise ParseError(f"not a version-{BUNDLE_VERSION} bundle archive")
    out: dict[str, FeedbackBundle] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        record = json.loads(line)
        out[record["task"]] = _bundle_from_dict(record["bundle"])
    return out


# -- freeform-output isolation ------------------------------------------------

def delimit(channel: str, text: str, nonce: str) -> str:
    """Wrap freeform target output in sentinel lines.

    The sentinel carries a per-campaign nonce; if the payload happens to
    contain the sentinel itself, the nonce is extended until it cannot, so
    embedded fake delimiters never terminate the block early.
    """
    tag = nonce
    while f"[[begin {channel} {tag}]]" in text or f"[[end {channel} {tag}]]" in text:
        tag = hashlib.sha256(f"{tag}|{text}".encode()).hexdigest()[:12]
    return f"[[begin {channel} {tag}]]\n{text}\n[[end {channel} {tag}]]"


def undelimit(wrapped: str) -> tuple[str, str]:
    """Inverse of delimit: returns (channel, payload)."""
    lines = wrapped.split("\n")
    head = re.fullmatch(r"\[\[begin (\S+) (\S+)\]\]", lines[0])
    if head is None or len(lines) < 2:
        raise ParseError("not a delimited block")
    channel, tag = head.group(1), head.group(2)
    if lines[-1] != f"[[end {channel} {tag}]]":
        raise ParseError("delimited block is not terminated")
    return channel, "\n".join(lines[1:-1])


def channel_text(bundle: FeedbackBundle, name: str, nonce: str) -> str:
    """Render one channel of a bundle as template-bindable text."""
    if name == "outcome":
        return bundle.outcome
    if name == "stdout":
        return delimit("stdout", bundle.stdout, nonce)
    if name == "stderr":
        return delimit("stderr", bundle.stderr, nonce)
    if name == "cov":
        return bundle.cov.serialize() if bundle.cov is not None else ""
    if name == "branch":
        return bundle.branch.serialize() if bundle.branch is not None else ""
    if name == "san":
        return "\n".join(r.raw for r in bundle.san)
    if name == "trace":
        return delimit("trace", json.dumps(bundle.traces, sort_keys=True), nonce)
    if name in bundle.extra:
        return delimit(name, bundle.extra[name], nonce)
    return ""
