"""Evaluation metrics for one scheduling run.

Delay and miss are counted in slots against ground truth: an execution of
``q`` at slot ``e`` with previous execution ``p`` covers the changes of ``q``
in ``(p, e]``. The earliest of them sets the delay, the rest are misses.
Changes left undetected when the run ends are misses too.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass

from .simulator import ExecutionLog, replay_check
from .trace_model import ChangeTrace, result_changed

COLUMNS = ("total qe", "irrelevant", "relevant", "eff(%)", "abs delay", "max delay", "abs miss", "max miss")


class AuditError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    total_qe: int = 0
    irrelevant: int = 0
    relevant: int = 0
    abs_delay: int = 0
    max_delay: int = 0
    abs_miss: int = 0
    max_miss: int = 0

    @property
    def effectivity(self) -> float:
        return self.relevant / self.total_qe if self.total_qe else 0.0

    def row(self) -> list[str]:
        return [
            str(self.total_qe),
            str(self.irrelevant),
            str(self.relevant),
            f"{100 * self.effectivity:.2f}",
            str(self.abs_delay),
            str(self.max_delay),
            str(self.abs_miss),
            str(self.max_miss),
        ]

    @classmethod
    def from_row(cls, cells) -> MetricsReport:
        vals = [int(cells[k]) for k in (0, 1, 2, 4, 5, 6, 7)]
        report = cls(*vals)
        if f"{100 * report.effectivity:.2f}" != cells[3].strip():
            raise ValueError(f"effectivity column {cells[3]!r} inconsistent with counts")
        return report


def compute_metrics(log: ExecutionLog, trace: ChangeTrace, *, check: bool = True) -> MetricsReport:
    if check and not replay_check(log, trace):
        raise AuditError("execution log does not match the trace")
    last = [0] * trace.n_queries
    misses = [0] * trace.n_queries
    total = relevant = abs_delay = max_delay = 0
    for q, e in log.executions():
        slots = trace.change_slots(q)
        lo = bisect.bisect_right(slots, last[q])
        hi = bisect.bisect_right(slots, e)
        total += 1
        if hi > lo:
            relevant += 1
            delay = e - slots[lo]
            abs_delay += delay
            max_delay = max(max_delay, delay)
            misses[q] += hi - lo - 1
        last[q] = e
    for q in range(trace.n_queries):
        slots = trace.change_slots(q)
        misses[q] += len(slots) - bisect.bisect_right(slots, last[q])
    return MetricsReport(
        total_qe=total,
        irrelevant=total - relevant,
        relevant=relevant,
        abs_delay=abs_delay,
        max_delay=max_delay,
        abs_miss=sum(misses),
        max_miss=max(misses, default=0),
    )


def brute_force_metrics(log: ExecutionLog, trace: ChangeTrace) -> MetricsReport:
    """Exhaustive recomputation over every (query, slot) pair.

    Shares no code with :func:`compute_metrics`: ground-truth changes are
    rederived here from the raw snapshots.
    """
    n, revs = trace.n_queries, trace.n_revisions
    executed = [[False] * (revs + 1) for _ in range(n)]
    for o in log.observations:
        if not o.failed:
            executed[o.query][o.slot] = True

    def known(q, i):
        while trace.result_ids[q][i] == "-":
            i -= 1
        return trace.results[trace.result_ids[q][i]]

    def is_change(q, i):
        if trace.result_ids[q][i] == "-":
            return False
        return result_changed(known(q, i - 1), known(q, i))

    total = relevant = abs_delay = max_delay = 0
    per_query_miss = []
    for q in range(n):
        q_miss = 0
        for e in range(1, revs + 1):
            if not executed[q][e]:
                continue
            p = max(j for j in range(e) if j == 0 or executed[q][j])
            changes = [s for s in range(p + 1, e + 1) if is_change(q, s)]
            total += 1
            if changes:
                relevant += 1
                abs_delay += e - changes[0]
                max_delay = max(max_delay, e - changes[0])
                q_miss += len(changes) - 1
        last = max(j for j in range(revs + 1) if j == 0 or executed[q][j])
        q_miss += sum(1 for s in range(last + 1, revs + 1) if is_change(q, s))
        per_query_miss.append(q_miss)
    return MetricsReport(
        total_qe=total,
        irrelevant=total - relevant,
        relevant=relevant,
        abs_delay=abs_delay,
        max_delay=max_delay,
        abs_miss=sum(per_query_miss),
        max_miss=max(per_query_miss, default=0),
    )
