"""Change traces: per-query, per-revision result fingerprints and execution times.

A trace is a complete grid. Every query has one cell per revision
``0..n_revisions``; revision 0 is the initial state every scheduler starts
from. A cell references a result snapshot by id, or holds the failure
sentinel when the recorder could not obtain a result.

File layout (UTF-8, one record per line)::

    TRACE v1 queries=<N> revisions=<n>
    R <result-id> ordered=<0|1>\t<token>\t<token>...
    E <query-id> <revision> <duration_ms> <result-id or ->

Tokens percent-encode ``%``, tab, CR and LF. Blank lines and lines starting
with ``#`` are ignored.
"""

from __future__ import annotations

import os
import re
import tempfile
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from urllib.parse import unquote

FAILED = "-"

_HEADER_RE = re.compile(r"^TRACE v1 queries=(\d+) revisions=(\d+)$")
_RESULT_ID_RE = re.compile(r"^[A-Za-z0-9_.:]+$")


class TraceError(ValueError):
    """Base class for trace validation and parse failures."""


class MalformedHeaderError(TraceError):
    pass


class MalformedRecordError(TraceError):
    pass


class DanglingReferenceError(TraceError):
    pass


class IncompleteGridError(TraceError):
    pass


class InvalidComparisonError(ValueError):
    """Raised when an ordered snapshot is compared with an unordered one."""


@dataclass(frozen=True)
class ResultSnapshot:
    """Canonical form of one query result.

    ``elements`` is the set of canonical tokens (solution rows, triples or the
    ASK boolean). Ordered results additionally keep ``sequence``.
    """

    elements: frozenset[str]
    sequence: tuple[str, ...] | None = None
    ordered: bool = False

    def __post_init__(self):
        if any(not tok for tok in self.elements):
            raise ValueError("snapshot tokens must be non-empty strings")
        if self.ordered:
            if self.sequence is None:
                raise ValueError("ordered snapshot requires a sequence")
            if frozenset(self.sequence) != self.elements:
                raise ValueError("sequence does not match element set")
        elif self.sequence is not None:
            raise ValueError("unordered snapshot must not carry a sequence")

    @classmethod
    def unordered(cls, tokens: Iterable[str]) -> ResultSnapshot:
        return cls(frozenset(tokens))

    @classmethod
    def from_sequence(cls, tokens: Iterable[str]) -> ResultSnapshot:
        seq = tuple(tokens)
        return cls(frozenset(seq), seq, True)

    @classmethod
    def ask(cls, value: bool) -> ResultSnapshot:
        return cls(frozenset(["true" if value else "false"]))

    def tokens(self) -> list[str]:
        """Tokens in serialization order: the sequence, or the sorted set."""
        if self.ordered:
            return list(self.sequence)
        return sorted(self.elements)


def result_changed(prev: ResultSnapshot, cur: ResultSnapshot) -> bool:
    """True if ``cur`` is a different result than ``prev``.

    Ordered results compare as sequences, everything else as sets.
    """
    if prev.ordered != cur.ordered:
        raise InvalidComparisonError("cannot compare ordered and unordered snapshots")
    if prev.ordered:
        return prev.sequence != cur.sequence
    return prev.elements != cur.elements


def jaccard_distance(a: ResultSnapshot, b: ResultSnapshot) -> float:
    union = len(a.elements | b.elements)
    if union == 0:
        return 0.0
    return 1.0 - len(a.elements & b.elements) / union


@dataclass(frozen=True)
class ChangeTrace:
    """Immutable, complete record of a query set over a revision sequence.

    ``durations[q][r]`` and ``result_ids[q][r]`` describe query ``q`` at
    revision ``r``. A result id of :data:`FAILED` marks an execution that
    produced no result; for ground truth such a cell carries the previous
    known result forward.
    """

    n_queries: int
    n_revisions: int
    durations: tuple[tuple[int, ...], ...]
    result_ids: tuple[tuple[str, ...], ...]
    results: Mapping[str, ResultSnapshot] = field(compare=True)

    def __post_init__(self):
        validate_trace(self)

    @classmethod
    def build(
        cls,
        durations: Sequence[Sequence[int]],
        result_ids: Sequence[Sequence[str]],
        results: Mapping[str, ResultSnapshot],
    ) -> ChangeTrace:
        n_queries = len(durations)
        if n_queries == 0:
            raise IncompleteGridError("trace has no queries")
        n_revisions = len(durations[0]) - 1
        return cls(
            n_queries,
            n_revisions,
            tuple(tuple(int(d) for d in row) for row in durations),
            tuple(tuple(row) for row in result_ids),
            dict(results),
        )

    def duration(self, q: int, rev: int) -> int:
        return self.durations[q][rev]

    def failed(self, q: int, rev: int) -> bool:
        return self.result_ids[q][rev] == FAILED

    def snapshot(self, q: int, rev: int) -> ResultSnapshot | None:
        rid = self.result_ids[q][rev]
        return None if rid == FAILED else self.results[rid]

    def effective_snapshot(self, q: int, rev: int) -> ResultSnapshot:
        """Snapshot at ``rev``, or the latest successful one before it."""
        row = self.result_ids[q]
        while row[rev] == FAILED:
            rev -= 1
        return self.results[row[rev]]

    def slot_total(self, rev: int) -> int:
        return sum(row[rev] for row in self.durations)

    def max_slot_total(self) -> int:
        return max(self.slot_total(r) for r in range(1, self.n_revisions + 1)) if self.n_revisions else 0

    @cached_property
    def _change_grid(self) -> tuple[tuple[int, ...], ...]:
        # per query: ascending slots i >= 1 with q in C_i
        grid = []
        for q in range(self.n_queries):
            slots = []
            prev = self.effective_snapshot(q, 0)
            for i in range(1, self.n_revisions + 1):
                if self.failed(q, i):
                    continue
                cur = self.snapshot(q, i)
                if cur is not prev and result_changed(prev, cur):
                    slots.append(i)
                prev = cur
            grid.append(tuple(slots))
        return tuple(grid)

    def change_slots(self, q: int) -> tuple[int, ...]:
        return self._change_grid[q]

    @cached_property
    def _changed_by_slot(self) -> tuple[frozenset[int], ...]:
        buckets: list[set[int]] = [set() for _ in range(self.n_revisions + 1)]
        for q, slots in enumerate(self._change_grid):
            for i in slots:
                buckets[i].add(q)
        return tuple(frozenset(b) for b in buckets)

    def total_changes(self) -> int:
        return sum(len(s) for s in self._change_grid)

    def truncated(self, n_revisions: int) -> ChangeTrace:
        """The same trace restricted to revisions ``0..n_revisions``."""
        if not 0 <= n_revisions <= self.n_revisions:
            raise IndexError(f"cannot truncate to {n_revisions} revisions")
        ids = tuple(row[: n_revisions + 1] for row in self.result_ids)
        used = {rid for row in ids for rid in row if rid != FAILED}
        return ChangeTrace(
            self.n_queries,
            n_revisions,
            tuple(row[: n_revisions + 1] for row in self.durations),
            ids,
            {rid: snap for rid, snap in self.results.items() if rid in used},
        )


def changed_set(trace: ChangeTrace, i: int) -> frozenset[int]:
    """Queries whose result at revision ``i`` differs from revision ``i - 1``."""
    if not 1 <= i <= trace.n_revisions:
        raise IndexError(f"slot {i} outside 1..{trace.n_revisions}")
    return trace._changed_by_slot[i]


def validate_trace(trace: ChangeTrace) -> None:
    n, revs = trace.n_queries, trace.n_revisions
    if n <= 0:
        raise IncompleteGridError("trace has no queries")
    if revs < 0:
        raise IncompleteGridError("negative revision count")
    if len(trace.durations) != n or len(trace.result_ids) != n:
        raise IncompleteGridError(f"expected {n} query rows")
    for q in range(n):
        drow, rrow = trace.durations[q], trace.result_ids[q]
        if len(drow) != revs + 1 or len(rrow) != revs + 1:
            raise IncompleteGridError(f"query {q}: expected {revs + 1} revisions")
        for r, (d, rid) in enumerate(zip(drow, rrow)):
            if d <= 0:
                raise MalformedRecordError(f"record (q={q}, rev={r}): duration must be positive")
            if rid == FAILED:
                if r == 0:
                    raise MalformedRecordError(f"record (q={q}, rev=0): initial result cannot be a failure")
                continue
            if rid not in trace.results:
                raise DanglingReferenceError(f"record (q={q}, rev={r}): unknown result id {rid!r}")
        first = trace.results[rrow[0]].ordered
        for r, rid in enumerate(rrow):
            if rid != FAILED and trace.results[rid].ordered != first:
                raise MalformedRecordError(f"record (q={q}, rev={r}): ordered flag differs from revision 0")


def _encode_token(tok: str) -> str:
    return tok.replace("%", "%25").replace("\t", "%09").replace("\n", "%0A").replace("\r", "%0D")


def dumps_trace(trace: ChangeTrace) -> str:
    lines = [f"TRACE v1 queries={trace.n_queries} revisions={trace.n_revisions}"]
    for rid, snap in trace.results.items():
        head = f"R {rid} ordered={int(snap.ordered)}"
        toks = snap.tokens()
        lines.append(head + ("\t" + "\t".join(_encode_token(t) for t in toks) if toks else ""))
    for r in range(trace.n_revisions + 1):
        for q in range(trace.n_queries):
            lines.append(f"E {q} {r} {trace.durations[q][r]} {trace.result_ids[q][r]}")
    return "\n".join(lines) + "\n"


def parse_result_line(line: str, lineno: int) -> tuple[str, ResultSnapshot]:
    head, _, rest = line.partition("\t")
    parts = head.split(" ")
    if len(parts) != 3 or parts[0] != "R" or parts[2] not in ("ordered=0", "ordered=1"):
        raise MalformedRecordError(f"line {lineno}: malformed result record")
    rid = parts[1]
    if not _RESULT_ID_RE.match(rid) or rid == FAILED:
        raise MalformedRecordError(f"line {lineno}: invalid result id {rid!r}")
    toks = [unquote(t) for t in rest.split("\t")] if rest else []
    try:
        if parts[2] == "ordered=1":
            snap = ResultSnapshot.from_sequence(toks)
        else:
            snap = ResultSnapshot.unordered(toks)
    except ValueError as exc:
        raise MalformedRecordError(f"line {lineno}: {exc}") from None
    return rid, snap


def loads_trace(text: str) -> ChangeTrace:
    lines = text.splitlines()
    body = [(no, ln) for no, ln in enumerate(lines, 1) if ln.strip() and not ln.startswith("#")]
    if not body:
        raise MalformedHeaderError("empty trace file")
    m = _HEADER_RE.match(body[0][1].strip())
    if not m:
        raise MalformedHeaderError(f"line {body[0][0]}: expected 'TRACE v1 queries=<N> revisions=<n>'")
    n_queries, n_revisions = int(m.group(1)), int(m.group(2))
    if n_queries == 0:
        raise MalformedHeaderError("trace declares zero queries")

    results: dict[str, ResultSnapshot] = {}
    durations = [[0] * (n_revisions + 1) for _ in range(n_queries)]
    ids: list[list[str | None]] = [[None] * (n_revisions + 1) for _ in range(n_queries)]
    for no, line in body[1:]:
        if line.startswith("R "):
            rid, snap = parse_result_line(line, no)
            if rid in results:
                raise MalformedRecordError(f"line {no}: duplicate result id {rid!r}")
            results[rid] = snap
        elif line.startswith("E "):
            parts = line.split()
            if len(parts) != 5:
                raise MalformedRecordError(f"line {no}: malformed execution record")
            try:
                q, r, d = int(parts[1]), int(parts[2]), int(parts[3])
            except ValueError:
                raise MalformedRecordError(f"line {no}: non-integer field") from None
            if not (0 <= q < n_queries and 0 <= r <= n_revisions):
                raise MalformedRecordError(f"line {no}: record (q={q}, rev={r}) outside declared grid")
            if ids[q][r] is not None:
                raise MalformedRecordError(f"line {no}: duplicate record (q={q}, rev={r})")
            if d <= 0:
                raise MalformedRecordError(f"line {no}: record (q={q}, rev={r}) has non-positive duration")
            durations[q][r] = d
            ids[q][r] = parts[4]
        else:
            raise MalformedRecordError(f"line {no}: unknown record type")

    for r in range(n_revisions + 1):
        for q in range(n_queries):
            if ids[q][r] is None:
                raise IncompleteGridError(f"missing record (q={q}, rev={r})")
    for q in range(n_queries):
        for r in range(n_revisions + 1):
            rid = ids[q][r]
            if rid != FAILED and rid not in results:
                raise DanglingReferenceError(f"record (q={q}, rev={r}) references unknown result {rid!r}")
    return ChangeTrace.build(durations, ids, results)


def load_trace(path: str | os.PathLike) -> ChangeTrace:
    return loads_trace(Path(path).read_text(encoding="utf-8"))


def save_trace(trace: ChangeTrace, path: str | os.PathLike) -> None:
    """Write ``trace`` atomically (temp file + rename)."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(dumps_trace(trace))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
