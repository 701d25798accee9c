"""Scheduling policies for refresh queries.

Non-selective policies (RR, SJF, LJF, CR, DJ) rank every query and execute
them in rank order until the slot budget is exhausted. Selective policies
(TTL, CV) only consider a subset of queries per slot and carry unexecuted
candidates over to the next slot, ahead of newly selected ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .trace_model import ChangeTrace


class ConfigError(ValueError):
    pass


class PolicyKind(str, Enum):
    RR = "RR"
    SJF = "SJF"
    LJF = "LJF"
    CR = "CR"
    DJ = "DJ"
    TTL = "TTL"
    CV = "CV"


ASCENDING = {PolicyKind.RR, PolicyKind.SJF, PolicyKind.LJF}
DESCENDING = {PolicyKind.CR, PolicyKind.DJ}
NON_SELECTIVE = ASCENDING | DESCENDING

# decay rate used when none is given
DEFAULT_LAMBDA = {
    PolicyKind.SJF: 0.5,
    PolicyKind.LJF: 0.5,
    PolicyKind.CR: 0.0,
    PolicyKind.DJ: 1.0,
}


@dataclass(frozen=True)
class PolicyConfig:
    kind: PolicyKind
    lam: float | None = None
    median_window: int = 5
    ttl_max: int = 32
    ttl_on_change: str = "halve"

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", PolicyKind(self.kind))
        except ValueError:
            raise ConfigError(f"unknown policy kind {self.kind!r}") from None
        if self.lam is not None and (self.lam < 0 or math.isnan(self.lam)):
            raise ConfigError("lambda must be non-negative")
        if self.median_window < 1:
            raise ConfigError("median window must be positive")
        if self.ttl_max < 1:
            raise ConfigError("ttl_max must be at least 1")
        if self.ttl_on_change not in ("halve", "reset"):
            raise ConfigError("ttl_on_change must be 'halve' or 'reset'")

    @property
    def decay(self) -> float:
        if self.lam is not None:
            return self.lam
        return DEFAULT_LAMBDA.get(self.kind, 0.0)

    @property
    def label(self) -> str:
        k = self.kind
        if k in (PolicyKind.SJF, PolicyKind.LJF, PolicyKind.CR, PolicyKind.DJ):
            return f"{k.value}(lambda={self.decay:g})"
        if k is PolicyKind.TTL:
            return f"TTL(max={self.ttl_max},on_change={self.ttl_on_change})"
        return k.value


class QueryHistory:
    """Observations a policy has made of one query.

    Index 0 is the initial execution at slot 0, which has no predecessor; its
    change flag and Jaccard entries are placeholders and never contribute to
    change-rate or dynamics scores.
    """

    __slots__ = ("prev_execs", "durations", "change_flags", "jaccard_obs", "_decay_cache")

    def __init__(self, initial_duration: int):
        self.prev_execs: list[int] = [0]
        self.durations: list[int] = [initial_duration]
        self.change_flags: list[bool] = [False]
        self.jaccard_obs: list[float] = [0.0]
        self._decay_cache: dict = {}

    @property
    def last_exec(self) -> int:
        return self.prev_execs[-1]

    def append(self, slot: int, duration: int, changed: bool, jaccard: float) -> None:
        if slot <= self.prev_execs[-1]:
            raise ValueError("executions must be appended in ascending slot order")
        self.prev_execs.append(slot)
        self.durations.append(duration)
        self.change_flags.append(changed)
        self.jaccard_obs.append(jaccard)

    def truncated(self, before: int) -> QueryHistory:
        """Copy holding only executions at slots < ``before``."""
        h = QueryHistory(self.durations[0])
        for k in range(1, len(self.prev_execs)):
            if self.prev_execs[k] >= before:
                break
            h.append(self.prev_execs[k], self.durations[k], self.change_flags[k], self.jaccard_obs[k])
        return h

    def decayed_sum(self, which: str, lam: float, i: int) -> float:
        """Sum of ``weight_j * exp(-lam * (i - j))`` over past executions.

        Zero weights are skipped, and the running sum is kept as
        (value at slot t, t) and decayed on demand.
        """
        key = (which, lam)
        consumed, value, at = self._decay_cache.get(key, (1, 0.0, 0))
        n = len(self.prev_execs)
        if consumed < n:
            weights = self.change_flags if which == "change" else self.jaccard_obs
            for k in range(consumed, n):
                w = weights[k]
                if which == "change":
                    w = 1.0 if w else -1.0
                if w == 0.0:
                    continue
                j = self.prev_execs[k]
                value = value * math.exp(-lam * (j - at)) + w
                at = j
            self._decay_cache[key] = (n, value, at)
        if value == 0.0:
            return 0.0
        return value * math.exp(-lam * (i - at))


def rank_rr(q: int, i: int, h: QueryHistory) -> float:
    return 1.0 / (i - h.last_exec)


def estimate_runtime(h: QueryHistory, window: int = 5) -> int:
    """Lower median of the most recent ``window`` observed durations."""
    recent = sorted(h.durations[-window:])
    return recent[(len(recent) - 1) // 2]


def rank_sjf(q: int, i: int, h: QueryHistory, lam: float, window: int = 5) -> float:
    return math.exp(-lam * (i - h.last_exec)) * estimate_runtime(h, window)


def rank_ljf(q: int, i: int, h: QueryHistory, lam: float, window: int = 5) -> float:
    return math.exp(-lam * (i - h.last_exec)) / estimate_runtime(h, window)


def change_indicator(h: QueryHistory, j: int) -> int:
    """+1 if the result observed at slot ``j`` differed from the one before it, else -1."""
    try:
        k = h.prev_execs.index(j)
    except ValueError:
        raise ValueError(f"slot {j} is not an execution slot of this query") from None
    if k == 0:
        raise ValueError("the initial execution has no predecessor to compare with")
    return 1 if h.change_flags[k] else -1


def rank_cr(q: int, i: int, h: QueryHistory, lam: float) -> float:
    return h.decayed_sum("change", lam, i)


def rank_dj(q: int, i: int, h: QueryHistory, lam: float = 1.0) -> float:
    return h.decayed_sum("jaccard", lam, i)


@dataclass
class TtlState:
    ttl: int = 1
    due_at: int = 1


def ttl_update(s: TtlState, q: int, changed: bool, cfg: PolicyConfig, slot: int) -> TtlState:
    if changed:
        ttl = 1 if cfg.ttl_on_change == "reset" else max(1, s.ttl // 2)
    else:
        ttl = min(2 * s.ttl, cfg.ttl_max)
    return TtlState(ttl, slot + ttl)


@dataclass
class Schedule:
    slot: int
    executed: list[int] = field(default_factory=list)
    spent_ms: int = 0
    carryover: list[int] = field(default_factory=list)


@dataclass
class PolicyState:
    """Mutable per-run state of the selective policies."""

    ttl: list[TtlState] = field(default_factory=list)
    carryover: list[int] = field(default_factory=list)
    # (query, change slot) for every change CV has not yet picked up
    pending: list[tuple[int, int]] = field(default_factory=list)

    @classmethod
    def initial(cls, n_queries: int) -> PolicyState:
        return cls(ttl=[TtlState() for _ in range(n_queries)])


def budget_walk(candidates: Sequence[int], trace: ChangeTrace, i: int, budget_ms: int) -> Schedule:
    """Execute candidates in order until the next one would overflow the budget."""
    sched = Schedule(i)
    for pos, q in enumerate(candidates):
        d = trace.durations[q][i]
        if sched.spent_ms + d > budget_ms:
            sched.carryover = list(candidates[pos:])
            break
        sched.executed.append(q)
        sched.spent_ms += d
    return sched


def select_clairvoyant(pending: Sequence[tuple[int, int]], trace: ChangeTrace, i: int, budget_ms: int) -> Schedule:
    order = []
    seen = set()
    for q, _ in sorted(pending, key=lambda e: (e[1], e[0])):
        if q not in seen:
            seen.add(q)
            order.append(q)
    return budget_walk(order, trace, i, budget_ms)


def nonselective_order(cfg: PolicyConfig, i: int, histories: Sequence[QueryHistory]) -> list[int]:
    kind, lam, window = cfg.kind, cfg.decay, cfg.median_window
    if kind is PolicyKind.RR:
        def score(q, h):
            return rank_rr(q, i, h)
    elif kind is PolicyKind.SJF:
        def score(q, h):
            return rank_sjf(q, i, h, lam, window)
    elif kind is PolicyKind.LJF:
        def score(q, h):
            return rank_ljf(q, i, h, lam, window)
    elif kind is PolicyKind.CR:
        def score(q, h):
            return -rank_cr(q, i, h, lam)
    elif kind is PolicyKind.DJ:
        def score(q, h):
            return -rank_dj(q, i, h, lam)
    else:
        raise ConfigError(f"{kind.value} is not a ranking policy")
    # older queries first on equal rank, then lower id
    keyed = [(score(q, h), h.last_exec, q) for q, h in enumerate(histories)]
    keyed.sort()
    return [q for _, _, q in keyed]


def ttl_candidates(i: int, state: PolicyState) -> list[int]:
    carried = list(state.carryover)
    skip = set(carried)
    due = [(s.due_at, q) for q, s in enumerate(state.ttl) if s.due_at <= i and q not in skip]
    due.sort()  # most overdue (earliest due_at) first, then id
    return carried + [q for _, q in due]


def build_schedule(
    cfg: PolicyConfig,
    i: int,
    budget_ms: int,
    trace: ChangeTrace,
    histories: Sequence[QueryHistory],
    state: PolicyState,
) -> Schedule:
    """Pick the queries to execute in slot ``i``.

    ``histories`` and ``state`` must hold only what was observed before slot
    ``i``; the trace is consulted for the actual durations the budget is
    charged with, and by CV for its pending changes (already in ``state``).
    """
    kind = cfg.kind
    if kind in NON_SELECTIVE:
        sched = budget_walk(nonselective_order(cfg, i, histories), trace, i, budget_ms)
        sched.carryover = []
        return sched
    if kind is PolicyKind.TTL:
        return budget_walk(ttl_candidates(i, state), trace, i, budget_ms)
    if kind is PolicyKind.CV:
        return select_clairvoyant(state.pending, trace, i, budget_ms)
    raise ConfigError(f"unknown policy kind {kind!r}")
