"""Recording change traces from a live SPARQL endpoint.

Every poll executes all registered queries once, canonicalizes the results
and appends one revision to a journal. The journal is append-only; a
revision becomes durable once its ``C <revision>`` commit line is written,
so a crash mid-poll loses at most the revision in progress.
"""

from __future__ import annotations

import base64
import http.client
import json
import logging
import os
import re
import socket
import time
import urllib.error
import urllib.parse
import urllib.request
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .trace_model import (
    FAILED,
    ChangeTrace,
    ResultSnapshot,
    _encode_token,
    parse_result_line,
    save_trace,
)

log = logging.getLogger(__name__)

FORMS = ("SELECT", "ASK", "CONSTRUCT", "DESCRIBE")
SPARQL_RESULTS_NS = "{http://www.w3.org/2005/sparql-results#}"
XSD_STRING = "http://www.w3.org/2001/XMLSchema#string"

RESULTS_ACCEPT = "application/sparql-results+json, application/sparql-results+xml;q=0.9"
GRAPH_ACCEPT = "application/n-triples, text/plain;q=0.5"


class RecorderError(Exception):
    pass


class EndpointTimeoutError(RecorderError):
    pass


class EndpointHTTPError(RecorderError):
    def __init__(self, status: int, reason: str = ""):
        super().__init__(f"HTTP {status} {reason}".strip())
        self.status = status


class MalformedResponseError(RecorderError):
    pass


class QueryFailedError(RecorderError):
    """All attempts failed. ``duration_ms`` is the total time spent trying."""

    def __init__(self, query_id: int, duration_ms: int, cause: Exception):
        super().__init__(f"query {query_id} failed: {cause}")
        self.query_id = query_id
        self.duration_ms = duration_ms
        self.cause = cause


@dataclass(frozen=True)
class EndpointConfig:
    endpoint_url: str
    timeout_ms: int = 60_000
    delay_ms: int = 0
    max_retries: int = 2
    method: str = "GET"

    def __post_init__(self):
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        if self.delay_ms < 0 or self.max_retries < 0:
            raise ValueError("delay_ms and max_retries must be non-negative")
        if self.method not in ("GET", "POST"):
            raise ValueError("method must be GET or POST")


_PROLOGUE_RE = re.compile(
    r"\s*(?:(?:PREFIX\s+[^\s:]*:\s*<[^>]*>)|(?:BASE\s+<[^>]*>)|(?:#[^\n]*\n))",
    re.IGNORECASE,
)


def detect_form(text: str) -> str:
    """Query form named by the first keyword after the prologue."""
    pos = 0
    while True:
        m = _PROLOGUE_RE.match(text, pos)
        if not m:
            break
        pos = m.end()
    m = re.match(r"\s*(\w+)", text[pos:])
    verb = m.group(1).upper() if m else ""
    if verb not in FORMS:
        raise ValueError(f"cannot determine query form (found {verb!r})")
    return verb


@dataclass(frozen=True)
class QueryRegistration:
    query_id: int
    query_text: str
    form: str
    ordered: bool = False

    def __post_init__(self):
        if self.form not in FORMS:
            raise ValueError(f"unknown query form {self.form!r}")
        if detect_form(self.query_text) != self.form:
            raise ValueError(f"query {self.query_id}: form {self.form} does not match query text")
        if self.ordered and self.form != "SELECT":
            raise ValueError(f"query {self.query_id}: only SELECT queries can be ordered")


def load_query_list(path: str | os.PathLike) -> list[QueryRegistration]:
    """Parse ``<id>\\t<form>\\t<ordered>\\t<base64 query text>`` lines."""
    regs = []
    for no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4 or parts[2] not in ("0", "1"):
            raise ValueError(f"{path}:{no}: expected id, form, ordered, base64 text")
        try:
            text = base64.b64decode(parts[3], validate=True).decode("utf-8")
        except ValueError:
            raise ValueError(f"{path}:{no}: query text is not valid base64") from None
        regs.append(QueryRegistration(int(parts[0]), text, parts[1].upper(), parts[2] == "1"))
    if [r.query_id for r in regs] != list(range(len(regs))):
        raise ValueError(f"{path}: query ids must be 0..N-1 in file order")
    return regs


def dumps_query_list(regs: Iterable[QueryRegistration]) -> str:
    return "".join(
        f"{r.query_id}\t{r.form}\t{int(r.ordered)}\t{base64.b64encode(r.query_text.encode()).decode()}\n"
        for r in regs
    )


# --- term rendering -------------------------------------------------------

def _escape_literal(s: str) -> str:
    out = []
    for ch in s:
        if ch == "\\":
            out.append("\\\\")
        elif ch == '"':
            out.append('\\"')
        elif ch == "\n":
            out.append("\\n")
        elif ch == "\r":
            out.append("\\r")
        elif ch == "\t":
            out.append("\\t")
        elif ord(ch) < 0x20 or ord(ch) == 0x7F:
            out.append(f"\\u{ord(ch):04X}")
        else:
            out.append(ch)
    return "".join(out)


def _escape_iri(s: str) -> str:
    return "".join(f"\\u{ord(c):04X}" if c in '<>"{}|^`\\' or ord(c) <= 0x20 else c for c in s)


@dataclass(frozen=True)
class Term:
    kind: str  # "uri", "literal" or "bnode"
    value: str
    lang: str | None = None
    datatype: str | None = None

    def render(self, bnode_label: str | None = None) -> str:
        if self.kind == "uri":
            return f"<{_escape_iri(self.value)}>"
        if self.kind == "bnode":
            return "_:" + (self.value if bnode_label is None else bnode_label)
        text = f'"{_escape_literal(self.value)}"'
        if self.lang:
            return f"{text}@{self.lang.lower()}"
        if self.datatype and self.datatype != XSD_STRING:
            return f"{text}^^<{_escape_iri(self.datatype)}>"
        return text


def _relabel(rows: Sequence[Sequence[tuple[str, Term]]], sort_rows: bool) -> list[str]:
    """Render rows of ``(prefix, term)`` cells, renaming blank nodes b0, b1, ...

    Labels are assigned by first occurrence. With ``sort_rows`` the rows are
    first sorted on their rendering with every blank node masked, which makes
    the labels independent of the endpoint's own naming for acyclic shapes.
    Rows that differ only in blank nodes fall back to the original labels.
    """
    if sort_rows:
        rows = sorted(
            rows,
            key=lambda r: (
                tuple(p + t.render("") for p, t in r),
                tuple(p + t.render() for p, t in r),
            ),
        )
    names: dict[str, str] = {}
    out = []
    for row in rows:
        parts = []
        for prefix, t in row:
            label = names.setdefault(t.value, f"b{len(names)}") if t.kind == "bnode" else None
            parts.append(prefix + t.render(label))
        out.append(" ".join(parts))
    return out


# --- SPARQL results formats -----------------------------------------------

def _json_term(b: dict) -> Term:
    kind = b.get("type")
    if kind == "typed-literal":
        kind = "literal"
    if kind not in ("uri", "literal", "bnode") or "value" not in b:
        raise MalformedResponseError(f"bad binding {b!r}")
    return Term(kind, b["value"], b.get("xml:lang"), b.get("datatype"))


def _parse_json_results(body: bytes):
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedResponseError(f"invalid JSON results: {exc}") from None
    if not isinstance(doc, dict):
        raise MalformedResponseError("JSON results document is not an object")
    if "boolean" in doc:
        return bool(doc["boolean"])
    try:
        bindings = doc["results"]["bindings"]
        return [{var: _json_term(val) for var, val in row.items()} for row in bindings]
    except (KeyError, TypeError, AttributeError):
        raise MalformedResponseError("JSON results lack results.bindings") from None


def _parse_xml_results(body: bytes):
    try:
        root = ET.fromstring(body)
    except ET.ParseError as exc:
        raise MalformedResponseError(f"invalid XML results: {exc}") from None
    ns = SPARQL_RESULTS_NS
    boolean = root.find(f"{ns}boolean")
    if boolean is not None:
        return (boolean.text or "").strip() == "true"
    results = root.find(f"{ns}results")
    if results is None:
        raise MalformedResponseError("XML results lack <results>")
    rows = []
    for res in results.findall(f"{ns}result"):
        row = {}
        for binding in res.findall(f"{ns}binding"):
            if len(binding) != 1:
                raise MalformedResponseError("binding must hold exactly one term")
            el = binding[0]
            tag = el.tag.replace(ns, "")
            if tag not in ("uri", "literal", "bnode"):
                raise MalformedResponseError(f"unknown term element {tag!r}")
            row[binding.get("name")] = Term(
                tag,
                el.text or "",
                el.get("{http://www.w3.org/XML/1998/namespace}lang"),
                el.get("datatype"),
            )
        rows.append(row)
    return rows


_NT_IRI = r"<([^>]*)>"
_NT_BNODE = r"_:([A-Za-z0-9_](?:[A-Za-z0-9_.\-]*[A-Za-z0-9_\-])?)"
_NT_LIT = r'"((?:[^"\\]|\\.)*)"(?:@([A-Za-z]+(?:-[A-Za-z0-9]+)*)|\^\^<([^>]*)>)?'
_NT_LINE = re.compile(
    rf"^\s*(?:{_NT_IRI}|{_NT_BNODE})\s+{_NT_IRI}\s+(?:{_NT_IRI}|{_NT_BNODE}|{_NT_LIT})\s*\.\s*(?:#.*)?$"
)
_ESCAPES = {"t": "\t", "b": "\b", "n": "\n", "r": "\r", "f": "\f", '"': '"', "'": "'", "\\": "\\"}


def _unescape(s: str) -> str:
    out = []
    k = 0
    while k < len(s):
        ch = s[k]
        if ch != "\\":
            out.append(ch)
            k += 1
            continue
        nxt = s[k + 1 : k + 2]
        if nxt in _ESCAPES:
            out.append(_ESCAPES[nxt])
            k += 2
        elif nxt in ("u", "U"):
            width = 4 if nxt == "u" else 8
            digits = s[k + 2 : k + 2 + width]
            try:
                out.append(chr(int(digits, 16)))
            except ValueError:
                raise MalformedResponseError(f"bad escape \\{nxt}{digits}") from None
            k += 2 + width
        else:
            raise MalformedResponseError(f"bad escape \\{nxt}")
    return "".join(out)


def parse_ntriples(body: bytes) -> list[tuple[Term, Term, Term]]:
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError:
        raise MalformedResponseError("N-Triples body is not UTF-8") from None
    triples = []
    for no, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        m = _NT_LINE.match(line)
        if not m:
            raise MalformedResponseError(f"N-Triples line {no} does not parse")
        s_iri, s_bn, p, o_iri, o_bn, o_lit, o_lang, o_dt = m.groups()
        s = Term("uri", _unescape(s_iri)) if s_iri is not None else Term("bnode", s_bn)
        if o_iri is not None:
            o = Term("uri", _unescape(o_iri))
        elif o_bn is not None:
            o = Term("bnode", o_bn)
        else:
            o = Term("literal", _unescape(o_lit), o_lang, _unescape(o_dt) if o_dt else None)
        triples.append((s, Term("uri", _unescape(p)), o))
    return triples


@dataclass(frozen=True)
class RawResponse:
    content_type: str
    body: bytes


def _kind_of(raw: RawResponse) -> str:
    ct = raw.content_type.split(";")[0].strip().lower()
    if "json" in ct:
        return "json"
    if "xml" in ct:
        return "xml"
    if ct in ("application/n-triples", "text/plain", "text/x-nt"):
        return "nt"
    head = raw.body.lstrip()[:1]
    return {b"{": "json", b"<": "xml"}.get(head, "nt")


def canonicalize_result(raw: RawResponse, reg: QueryRegistration) -> ResultSnapshot:
    kind = _kind_of(raw)
    if reg.form in ("CONSTRUCT", "DESCRIBE"):
        if kind != "nt":
            raise MalformedResponseError(f"expected N-Triples for {reg.form}, got {raw.content_type!r}")
        rows = [[("", t) for t in triple] for triple in parse_ntriples(raw.body)]
        tokens = _relabel(rows, sort_rows=True)
        return ResultSnapshot.unordered(tokens)
    if kind not in ("json", "xml"):
        raise MalformedResponseError(f"expected SPARQL results, got {raw.content_type!r}")
    parsed = _parse_json_results(raw.body) if kind == "json" else _parse_xml_results(raw.body)
    if reg.form == "ASK":
        if not isinstance(parsed, bool):
            raise MalformedResponseError("ASK response carries no boolean")
        return ResultSnapshot.ask(parsed)
    if isinstance(parsed, bool):
        raise MalformedResponseError("SELECT response carries a boolean")
    # unbound variables are simply absent from a row
    rows = [[(f"?{var}=", t) for var, t in sorted(row.items())] for row in parsed]
    tokens = _relabel(rows, sort_rows=not reg.ordered)
    if reg.ordered:
        return ResultSnapshot.from_sequence(tokens)
    return ResultSnapshot.unordered(tokens)


# --- transport --------------------------------------------------------------

class Throttle:
    """Enforces a minimum gap between the starts of consecutive requests."""

    def __init__(self, delay_ms: int, clock: Callable[[], float] = time.monotonic, sleep=time.sleep):
        self.delay = delay_ms / 1000.0
        self.clock = clock
        self.sleep = sleep
        self._last: float | None = None

    def wait(self) -> None:
        if self._last is not None:
            remaining = self._last + self.delay - self.clock()
            if remaining > 0:
                self.sleep(remaining)
        self._last = self.clock()


def _http_fetch(cfg: EndpointConfig, reg: QueryRegistration) -> RawResponse:
    accept = GRAPH_ACCEPT if reg.form in ("CONSTRUCT", "DESCRIBE") else RESULTS_ACCEPT
    params = urllib.parse.urlencode({"query": reg.query_text})
    if cfg.method == "GET":
        sep = "&" if "?" in cfg.endpoint_url else "?"
        req = urllib.request.Request(cfg.endpoint_url + sep + params, headers={"Accept": accept})
    else:
        req = urllib.request.Request(
            cfg.endpoint_url,
            data=params.encode("ascii"),
            headers={"Accept": accept, "Content-Type": "application/x-www-form-urlencoded"},
        )
    try:
        with urllib.request.urlopen(req, timeout=cfg.timeout_ms / 1000.0) as resp:
            return RawResponse(resp.headers.get("Content-Type", ""), resp.read())
    except urllib.error.HTTPError as exc:
        raise EndpointHTTPError(exc.code, str(exc.reason)) from None
    except (socket.timeout, TimeoutError):
        raise EndpointTimeoutError(f"no response within {cfg.timeout_ms} ms") from None
    except urllib.error.URLError as exc:
        if isinstance(exc.reason, (socket.timeout, TimeoutError)):
            raise EndpointTimeoutError(f"no response within {cfg.timeout_ms} ms") from None
        raise RecorderError(f"cannot reach endpoint: {exc.reason}") from None
    except (OSError, http.client.HTTPException) as exc:
        raise RecorderError(f"connection failed: {exc!r}") from None


def execute_query(
    cfg: EndpointConfig,
    reg: QueryRegistration,
    throttle: Throttle | None = None,
) -> tuple[ResultSnapshot, int]:
    """Run ``reg`` against the endpoint, retrying up to ``cfg.max_retries`` times.

    Returns the canonical snapshot and the wall-clock milliseconds from
    sending the request to finishing canonicalization. Raises
    :class:`QueryFailedError` once every attempt has failed.
    """
    throttle = throttle or Throttle(cfg.delay_ms)
    spent = 0.0
    error: Exception | None = None
    for attempt in range(cfg.max_retries + 1):
        throttle.wait()
        start = time.perf_counter()
        try:
            snap = canonicalize_result(_http_fetch(cfg, reg), reg)
        except RecorderError as exc:
            spent += time.perf_counter() - start
            error = exc
            log.warning("query %d attempt %d failed: %s", reg.query_id, attempt + 1, exc)
            continue
        return snap, max(1, round((time.perf_counter() - start) * 1000))
    raise QueryFailedError(reg.query_id, max(1, round(spent * 1000)), error)


# --- journal ----------------------------------------------------------------

class Recording:
    """Append-only journal of recorded revisions.

    Layout: a ``RECORDING v1 queries=<N>`` header, then per revision the
    ``R`` lines of results not seen before, one ``E`` line per query and a
    closing ``C <revision>`` line. Anything after the last commit line is a
    revision interrupted mid-poll and is discarded on open.
    """

    def __init__(self, path: Path, n_queries: int):
        self.path = path
        self.n_queries = n_queries
        self.results: dict[str, ResultSnapshot] = {}
        self._ids: dict[ResultSnapshot, str] = {}
        self.columns: list[list[tuple[int, str]]] = []

    @classmethod
    def open(cls, path: str | os.PathLike, n_queries: int) -> Recording:
        path = Path(path)
        rec = cls(path, n_queries)
        if not path.exists():
            path.write_text(f"RECORDING v1 queries={n_queries}\n", encoding="utf-8")
            return rec
        lines = path.read_text(encoding="utf-8").split("\n")
        if lines[0] != f"RECORDING v1 queries={n_queries}":
            raise RecorderError(f"{path}: not a recording journal for {n_queries} queries")
        committed_upto = 1
        pending_results: dict[str, ResultSnapshot] = {}
        column: dict[int, tuple[int, str]] = {}
        for no, line in enumerate(lines[1:], 2):
            if not line:
                continue
            if line.startswith("R "):
                try:
                    rid, snap = parse_result_line(line, no)
                except ValueError:
                    break
                pending_results[rid] = snap
            elif line.startswith("E "):
                parts = line.split(" ")
                try:
                    q, r, d = int(parts[1]), int(parts[2]), int(parts[3])
                except (ValueError, IndexError):
                    break
                if len(parts) != 5 or r != len(rec.columns) or not 0 <= q < n_queries:
                    break
                column[q] = (d, parts[4])
            elif line.startswith("C "):
                if line[2:] != str(len(rec.columns)) or sorted(column) != list(range(n_queries)):
                    break
                rec.results.update(pending_results)
                rec.columns.append([column[q] for q in range(n_queries)])
                pending_results, column = {}, {}
                committed_upto = no
            else:
                break
        rec._ids = {snap: rid for rid, snap in rec.results.items()}
        # drop the interrupted tail so appends continue from the last commit
        keep = "\n".join(lines[:committed_upto]) + "\n"
        if keep != path.read_text(encoding="utf-8"):
            log.warning("%s: discarding uncommitted revision data", path)
            path.write_text(keep, encoding="utf-8")
        return rec

    @property
    def n_revisions_recorded(self) -> int:
        return len(self.columns)

    def commit(self, cells: Sequence[tuple[int, ResultSnapshot | None]]) -> int:
        if len(cells) != self.n_queries:
            raise ValueError("a revision needs one cell per query")
        rev = len(self.columns)
        lines = []
        column = []
        for q, (duration, snap) in enumerate(cells):
            if snap is None:
                rid = FAILED
            else:
                rid = self._ids.get(snap)
                if rid is None:
                    rid = f"r{len(self.results)}"
                    self.results[rid] = snap
                    self._ids[snap] = rid
                    toks = snap.tokens()
                    tail = "\t" + "\t".join(_encode_token(t) for t in toks) if toks else ""
                    lines.append(f"R {rid} ordered={int(snap.ordered)}{tail}")
            lines.append(f"E {q} {rev} {duration} {rid}")
            column.append((duration, rid))
        lines.append(f"C {rev}")
        with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self.columns.append(column)
        return rev

    def to_trace(self) -> ChangeTrace:
        if not self.columns:
            raise RecorderError("nothing recorded yet")
        durations = [[col[q][0] for col in self.columns] for q in range(self.n_queries)]
        ids = [[col[q][1] for col in self.columns] for q in range(self.n_queries)]
        return ChangeTrace.build(durations, ids, self.results)


def record_revision(
    cfg: EndpointConfig,
    registrations: Sequence[QueryRegistration],
    recording: Recording,
    throttle: Throttle | None = None,
    trace_path: str | os.PathLike | None = None,
) -> ChangeTrace:
    """Poll every registered query once and append the results as a revision.

    A query that still fails after its retries is stored as a failure
    sentinel. The initial revision has no such fallback: a failure there
    aborts the poll without committing anything.
    """
    if [r.query_id for r in registrations] != list(range(recording.n_queries)):
        raise ValueError("registrations must cover query ids 0..N-1 in order")
    throttle = throttle or Throttle(cfg.delay_ms)
    initial = recording.n_revisions_recorded == 0
    cells = []
    for reg in registrations:
        try:
            cells.append(execute_query(cfg, reg, throttle)[::-1])
        except QueryFailedError as exc:
            if initial:
                raise
            log.error("%s; storing failure sentinel", exc)
            cells.append((exc.duration_ms, None))
    recording.commit(cells)
    trace = recording.to_trace()
    if trace_path is not None:
        save_trace(trace, trace_path)
    return trace
