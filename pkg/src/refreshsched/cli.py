"""Command-line front end: ``generate``, ``record``, ``run`` and ``inspect``."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .metrics import COLUMNS, MetricsReport, compute_metrics
from .policies import ConfigError, PolicyConfig, PolicyKind
from .recorder import EndpointConfig, RecorderError, Recording, load_query_list, record_revision
from .simulator import RunConfig, run_simulation, save_log, unlimited_budget
from .trace_model import ChangeTrace, TraceError, changed_set, dumps_trace, load_trace
from .tracegen import GeneratorConfig, GeneratorConfigError, config_from_pairs, generate_trace, load_config

log = logging.getLogger("refreshsched")

FORMATS = ("csv", "tsv", "markdown")
_POLICY_KEYS = {"lambda": "lam", "window": "median_window", "max": "ttl_max", "on_change": "ttl_on_change"}


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class Budget:
    """A slot budget in ms; ``None`` means unlimited."""

    ms: int | None

    @property
    def label(self) -> str:
        return "inf" if self.ms is None else f"{self.ms}ms"

    def resolve(self, trace: ChangeTrace) -> int:
        return unlimited_budget(trace) if self.ms is None else self.ms

    def sort_key(self):
        return (self.ms is None, self.ms or 0)


def parse_budget(text: str) -> Budget:
    """``inf``, ``<n>ms``, ``<x>s`` or a bare number of seconds."""
    t = text.strip().lower()
    if t in ("inf", "unlimited"):
        return Budget(None)
    m = re.fullmatch(r"(\d+(?:\.\d+)?)(ms|s)?", t)
    if not m:
        raise UsageError(f"bad budget {text!r}; use inf, <sec>s or <ms>ms")
    value = float(m.group(1))
    ms = value if m.group(2) == "ms" else value * 1000
    if ms != int(ms) or ms <= 0:
        raise UsageError(f"budget {text!r} must be a positive whole number of milliseconds")
    return Budget(int(ms))


def parse_policy(text: str) -> PolicyConfig:
    """``NAME[:k=v,...]``, e.g. ``cr:lambda=0.5`` or ``ttl:max=32,on_change=reset``."""
    name, _, opts = text.partition(":")
    try:
        kind = PolicyKind(name.strip().upper())
    except ValueError:
        raise UsageError(f"unknown policy {name!r}; choose from {', '.join(k.value for k in PolicyKind)}") from None
    kwargs: dict = {}
    for item in filter(None, (s.strip() for s in opts.split(","))):
        key, eq, val = item.partition("=")
        if not eq or key not in _POLICY_KEYS:
            raise UsageError(f"bad policy option {item!r}; known keys: {', '.join(_POLICY_KEYS)}")
        field = _POLICY_KEYS[key]
        try:
            kwargs[field] = val if field == "ttl_on_change" else (float(val) if field == "lam" else int(val))
        except ValueError:
            raise UsageError(f"bad value in policy option {item!r}") from None
    try:
        return PolicyConfig(kind, **kwargs)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _run_cell(args) -> MetricsReport:
    trace, policy, budget_ms, audit = args
    run_log = run_simulation(RunConfig(policy, budget_ms, trace))
    if audit is not None:
        save_log(run_log, audit)
    return compute_metrics(run_log, trace)


def run_matrix(trace, policies, budgets, jobs=1, audit_dir=None):
    """Run every (policy, budget) pair; rows sorted by budget, then policy label."""
    if not policies or not budgets:
        raise UsageError("need at least one policy and one budget")
    cells = sorted(
        ((b, p) for b in budgets for p in policies),
        key=lambda c: (c[0].sort_key(), c[1].label),
    )
    tasks = []
    for b, p in cells:
        audit = None
        if audit_dir is not None:
            audit = Path(audit_dir) / f"{p.label}_{b.label}.log".replace("/", "_")
        tasks.append((trace, p, b.resolve(trace), audit))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_run_cell, tasks))
    else:
        reports = [_run_cell(t) for t in tasks]
    return [(p, b, r) for (b, p), r in zip(cells, reports)]


def format_table(rows, fmt: str) -> str:
    header = ["policy", "budget", *COLUMNS]
    body = [[p.label, b.label, *r.row()] for p, b, r in rows]
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(r) + " |" for r in body]
        return "\n".join(lines) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t" if fmt == "tsv" else ",", lineterminator="\n")
    writer.writerow(header)
    writer.writerows(body)
    return buf.getvalue()


def parse_table(text: str, fmt: str) -> list[tuple[str, str, MetricsReport]]:
    """Inverse of :func:`format_table`."""
    if fmt == "markdown":
        rows = [[c.strip() for c in ln.strip().strip("|").split("|")] for ln in text.splitlines()[2:] if ln.strip()]
    else:
        rows = list(csv.reader(io.StringIO(text), delimiter="\t" if fmt == "tsv" else ","))[1:]
    return [(r[0], r[1], MetricsReport.from_row(r[2:])) for r in rows]


def inspect_revisions(trace: ChangeTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["revision", "changed_queries", "cumulative_distinct_changed"])
    seen: set[int] = set()
    for i in range(1, trace.n_revisions + 1):
        changed = changed_set(trace, i)
        seen |= changed
        w.writerow([i, len(changed), len(seen)])
    return buf.getvalue()


def inspect_queries(trace: ChangeTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query", "changes", "change_slots"])
    for q in range(trace.n_queries):
        slots = trace.change_slots(q)
        w.writerow([q, len(slots), " ".join(map(str, slots))])
    return buf.getvalue()


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _load(path: str) -> ChangeTrace:
    try:
        return load_trace(path)
    except OSError as exc:
        raise UsageError(f"cannot read trace {path}: {exc.strerror}") from None
    except TraceError as exc:
        raise UsageError(f"invalid trace {path}: {exc}") from None


def cmd_generate(args) -> int:
    try:
        cfg = load_config(args.config) if args.config else GeneratorConfig()
        pairs = dict(kv.split("=", 1) for kv in args.set)
        for flag, key in (("seed", "seed"), ("queries", "n_queries"), ("revisions", "n_revisions")):
            if getattr(args, flag) is not None:
                pairs[key] = str(getattr(args, flag))
        cfg = config_from_pairs(pairs, cfg)
    except (GeneratorConfigError, OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    _emit(dumps_trace(generate_trace(cfg)), args.out)
    return 0


def cmd_record(args) -> int:
    try:
        regs = load_query_list(args.queries)
        cfg = EndpointConfig(args.endpoint, args.timeout_ms, args.delay_ms, args.retries, args.method)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    journal = args.journal or args.out + ".journal"
    recording = Recording.open(journal, len(regs))
    for k in range(args.polls):
        if k:
            time.sleep(args.interval)
        trace = record_revision(cfg, regs, recording, trace_path=args.out)
        log.info("recorded revision %d (%d queries)", trace.n_revisions, trace.n_queries)
    return 0


def cmd_run(args) -> int:
    if not args.policy:
        raise UsageError("at least one --policy is required")
    if not args.budget:
        raise UsageError("at least one --budget is required")
    policies = [parse_policy(p) for p in args.policy]
    budgets = [parse_budget(b) for b in args.budget]
    trace = _load(args.trace)
    if args.audit_dir:
        Path(args.audit_dir).mkdir(parents=True, exist_ok=True)
    rows = run_matrix(trace, policies, budgets, args.jobs, args.audit_dir)
    _emit(format_table(rows, args.format), args.out)
    return 0


def cmd_inspect(args) -> int:
    trace = _load(args.trace)
    _emit(inspect_queries(trace) if args.per_query else inspect_revisions(trace), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refreshsched", description="Refresh-query scheduling simulator.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a seeded synthetic trace")
    g.add_argument("--seed", type=int)
    g.add_argument("--queries", type=int)
    g.add_argument("--revisions", type=int)
    g.add_argument("--config", help="key = value generator config file")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one generator option")
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("record", help="poll a SPARQL endpoint and append revisions to a trace")
    r.add_argument("--queries", required=True, help="query list file")
    r.add_argument("--endpoint", required=True)
    r.add_argument("--out", required=True, help="trace file, rewritten after every poll")
    r.add_argument("--journal", help="append-only journal (default: <out>.journal)")
    r.add_argument("--polls", type=int, default=1)
    r.add_argument("--interval", type=float, default=3600.0, help="seconds between polls")
    r.add_argument("--timeout-ms", type=int, default=60_000)
    r.add_argument("--delay-ms", type=int, default=0, help="minimum gap between requests")
    r.add_argument("--retries", type=int, default=2)
    r.add_argument("--method", choices=("GET", "POST"), default="GET")
    r.set_defaults(func=cmd_record)

    x = sub.add_parser("run", help="simulate policies over a trace and print the metrics table")
    x.add_argument("--trace", required=True)
    x.add_argument("--policy", action="append", default=[], help="NAME[:k=v,...], repeatable")
    x.add_argument("--budget", action="append", default=[], help="inf, <sec>s or <ms>ms, repeatable")
    x.add_argument("--format", choices=FORMATS, default="csv")
    x.add_argument("--out")
    x.add_argument("--jobs", type=int, default=1)
    x.add_argument("--audit-dir", help="write one execution log per run here")
    x.set_defaults(func=cmd_run)

    i = sub.add_parser("inspect", help="per-revision or per-query change counts as CSV")
    i.add_argument("--trace", required=True)
    i.add_argument("--per-query", action="store_true")
    i.add_argument("--out")
    i.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except RecorderError as exc:
        print(f"refreshsched: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
