"""Slot-by-slot replay of a change trace under one scheduling policy."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from .policies import (
    PolicyConfig,
    PolicyKind,
    PolicyState,
    QueryHistory,
    Schedule,
    build_schedule,
    ttl_update,
)
from .policies import ConfigError
from .trace_model import ChangeTrace, changed_set, jaccard_distance, result_changed


class BudgetExceededError(AssertionError):
    pass


@dataclass(frozen=True)
class Observation:
    slot: int
    query: int
    duration_ms: int
    changed: bool
    jaccard: float
    failed: bool = False


@dataclass(frozen=True)
class RunConfig:
    policy: PolicyConfig
    budget_ms: int
    trace: ChangeTrace

    def __post_init__(self):
        if self.budget_ms <= 0:
            raise ConfigError("budget must be positive")


@dataclass
class ExecutionLog:
    n_queries: int
    budget_ms: int
    schedules: list[Schedule] = field(default_factory=list)
    observations: list[Observation] = field(default_factory=list)

    def executions(self):
        """Successful (query, slot) executions in log order."""
        return [(o.query, o.slot) for o in self.observations if not o.failed]


def unlimited_budget(trace: ChangeTrace) -> int:
    """A budget exceeding the total duration of every slot."""
    return max(trace.max_slot_total(), 1) + 1


def run_simulation(cfg: RunConfig) -> ExecutionLog:
    trace, policy, budget = cfg.trace, cfg.policy, cfg.budget_ms
    n = trace.n_queries
    histories = [QueryHistory(trace.durations[q][0]) for q in range(n)]
    state = PolicyState.initial(n)
    log = ExecutionLog(n, budget)
    is_cv = policy.kind is PolicyKind.CV
    is_ttl = policy.kind is PolicyKind.TTL

    for i in range(1, trace.n_revisions + 1):
        if is_cv:
            state.pending.extend((q, i) for q in sorted(changed_set(trace, i)))
        sched = build_schedule(policy, i, budget, trace, histories, state)
        if sched.spent_ms > budget:
            raise BudgetExceededError(f"slot {i}: spent {sched.spent_ms} ms of {budget} ms")
        for q in sched.executed:
            d = trace.durations[q][i]
            if trace.failed(q, i):
                log.observations.append(Observation(i, q, d, False, 0.0, failed=True))
                continue
            h = histories[q]
            prev = trace.snapshot(q, h.last_exec)
            cur = trace.snapshot(q, i)
            changed = result_changed(prev, cur)
            jac = jaccard_distance(prev, cur)
            h.append(i, d, changed, jac)
            log.observations.append(Observation(i, q, d, changed, jac))
            if is_ttl:
                state.ttl[q] = ttl_update(state.ttl[q], q, changed, policy, i)
        if is_cv:
            done = {q for q in sched.executed if not trace.failed(q, i)}
            state.pending = [e for e in state.pending if e[0] not in done]
        if is_ttl:
            state.carryover = list(sched.carryover)
        log.schedules.append(sched)
    return log


def replay_check(log: ExecutionLog, trace: ChangeTrace) -> bool:
    """Recompute every logged observation from the raw trace."""
    if log.n_queries != trace.n_queries:
        return False
    if [s.slot for s in log.schedules] != list(range(1, trace.n_revisions + 1)):
        return False
    by_slot: dict[int, list[Observation]] = {}
    for o in log.observations:
        by_slot.setdefault(o.slot, []).append(o)
    if set(by_slot) - {s.slot for s in log.schedules}:
        return False
    last = [0] * trace.n_queries
    for sched in log.schedules:
        obs = by_slot.get(sched.slot, [])
        if [o.query for o in obs] != sched.executed or len(set(sched.executed)) != len(sched.executed):
            return False
        if sched.spent_ms != sum(o.duration_ms for o in obs) or sched.spent_ms > log.budget_ms:
            return False
        for o in obs:
            q, i = o.query, o.slot
            if not 0 <= q < trace.n_queries or o.duration_ms != trace.durations[q][i]:
                return False
            if o.failed != trace.failed(q, i):
                return False
            if o.failed:
                if o.changed or o.jaccard != 0.0:
                    return False
                continue
            prev, cur = trace.snapshot(q, last[q]), trace.snapshot(q, i)
            if o.changed != result_changed(prev, cur) or o.jaccard != jaccard_distance(prev, cur):
                return False
            last[q] = i
    return True


def dumps_log(log: ExecutionLog) -> str:
    """Audit file: one ``S`` line per slot followed by its ``X``/``F`` lines."""
    lines = [f"LOG v1 queries={log.n_queries} budget_ms={log.budget_ms} slots={len(log.schedules)}"]
    by_slot: dict[int, list[Observation]] = {}
    for o in log.observations:
        by_slot.setdefault(o.slot, []).append(o)
    for s in log.schedules:
        carry = ",".join(map(str, s.carryover)) or "-"
        lines.append(f"S {s.slot} {s.spent_ms} {carry}")
        for o in by_slot.get(s.slot, []):
            if o.failed:
                lines.append(f"F {o.slot} {o.query} {o.duration_ms}")
            else:
                lines.append(f"X {o.slot} {o.query} {o.duration_ms} {int(o.changed)} {o.jaccard!r}")
    return "\n".join(lines) + "\n"


def loads_log(text: str) -> ExecutionLog:
    rows = [ln for ln in text.splitlines() if ln.strip()]
    if not rows or not rows[0].startswith("LOG v1 "):
        raise ValueError("not an execution log")
    head = dict(kv.split("=", 1) for kv in rows[0].split()[2:])
    log = ExecutionLog(int(head["queries"]), int(head["budget_ms"]))
    for ln in rows[1:]:
        parts = ln.split()
        if parts[0] == "S":
            carry = [] if parts[3] == "-" else [int(x) for x in parts[3].split(",")]
            log.schedules.append(Schedule(int(parts[1]), [], int(parts[2]), carry))
        elif parts[0] in ("X", "F"):
            slot, q, d = int(parts[1]), int(parts[2]), int(parts[3])
            if parts[0] == "X":
                o = Observation(slot, q, d, parts[4] == "1", float(parts[5]))
            else:
                o = Observation(slot, q, d, False, 0.0, failed=True)
            log.observations.append(o)
            if not log.schedules or log.schedules[-1].slot != slot:
                raise ValueError(f"observation for slot {slot} outside its slot block")
            log.schedules[-1].executed.append(q)
        else:
            raise ValueError(f"unknown log record {parts[0]!r}")
    return log


def save_log(log: ExecutionLog, path: str | os.PathLike) -> None:
    Path(path).write_text(dumps_log(log), encoding="utf-8")


def load_log(path: str | os.PathLike) -> ExecutionLog:
    return loads_log(Path(path).read_text(encoding="utf-8"))
