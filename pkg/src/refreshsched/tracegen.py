"""Seeded synthetic change traces.

Each query gets a Bernoulli change probability from a mixture: a share of
static queries (never change), a share of hot queries (fixed high rate), and
the rest drawn from a Pareto tail ``min(1, tail_scale * Pareto(tail_shape))``.
Base durations are log-uniform in ``[min_ms, max_ms]``, except that for
queries that can change the position within the log range is skewed towards
the long end by ``change_duration_bias`` (0 disables the skew). Every cell
applies a uniform multiplicative jitter of ``+-jitter``. A change replaces
``max(1, round(churn * size))`` result elements with fresh tokens, so a new
snapshot never equals an earlier one.
"""

from __future__ import annotations

import math
import os
import random
from dataclasses import dataclass, fields
from pathlib import Path

from .trace_model import ChangeTrace, ResultSnapshot


class GeneratorConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    n_queries: int = 100
    n_revisions: int = 200
    static_fraction: float = 0.6
    hot_fraction: float = 0.05
    hot_probability: float = 0.5
    tail_shape: float = 1.2
    tail_scale: float = 0.01
    min_ms: int = 10
    max_ms: int = 5000
    jitter: float = 0.2
    churn: float = 0.3
    max_result_size: int = 20
    ordered_fraction: float = 0.1
    change_duration_bias: float = 1.0

    def __post_init__(self):
        if not -(2**63) <= self.seed < 2**64:
            raise GeneratorConfigError("seed must fit in 64 bits")
        if self.n_queries < 1:
            raise GeneratorConfigError("n_queries must be at least 1")
        if self.n_revisions < 0:
            raise GeneratorConfigError("n_revisions must be non-negative")
        for name in ("static_fraction", "hot_fraction", "hot_probability", "churn", "ordered_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise GeneratorConfigError(f"{name} must lie in [0, 1]")
        if self.static_fraction + self.hot_fraction > 1.0:
            raise GeneratorConfigError("static_fraction + hot_fraction exceeds 1")
        if self.tail_shape <= 0 or self.tail_scale < 0:
            raise GeneratorConfigError("tail_shape must be positive and tail_scale non-negative")
        if self.min_ms < 1 or self.max_ms < self.min_ms:
            raise GeneratorConfigError("need 1 <= min_ms <= max_ms")
        if not 0.0 <= self.jitter < 1.0:
            raise GeneratorConfigError("jitter must lie in [0, 1)")
        if self.change_duration_bias < 0:
            raise GeneratorConfigError("change_duration_bias must be non-negative")
        if self.max_result_size < 0:
            raise GeneratorConfigError("max_result_size must be non-negative")


@dataclass(frozen=True)
class QueryProfile:
    change_probability: float
    base_ms: float
    size: int
    ordered: bool


def _draw_profiles(cfg: GeneratorConfig, rng: random.Random) -> list[QueryProfile]:
    lo, hi = math.log(cfg.min_ms), math.log(cfg.max_ms)
    profiles = []
    for _ in range(cfg.n_queries):
        u = rng.random()
        if u < cfg.static_fraction:
            p = 0.0
        elif u < cfg.static_fraction + cfg.hot_fraction:
            p = cfg.hot_probability
        else:
            p = min(1.0, cfg.tail_scale * rng.paretovariate(cfg.tail_shape))
        pos = rng.random()
        if p > 0.0:
            pos = pos ** (1.0 / (1.0 + cfg.change_duration_bias))
        base = math.exp(lo + pos * (hi - lo))
        size = rng.randint(0, cfg.max_result_size)
        ordered = rng.random() < cfg.ordered_fraction
        profiles.append(QueryProfile(p, base, size, ordered))
    return profiles


def query_profiles(cfg: GeneratorConfig) -> list[QueryProfile]:
    """The per-query parameters :func:`generate_trace` draws for ``cfg``."""
    return _draw_profiles(cfg, random.Random(cfg.seed))


def generate_trace(cfg: GeneratorConfig) -> ChangeTrace:
    rng = random.Random(cfg.seed)
    profiles = _draw_profiles(cfg, rng)
    counter = 0

    def fresh(k):
        nonlocal counter
        toks = [f"e{counter + j}" for j in range(k)]
        counter += k
        return toks

    results: dict[str, ResultSnapshot] = {}
    durations: list[list[int]] = []
    ids: list[list[str]] = []
    for prof in profiles:
        tokens = fresh(prof.size)
        row_ids = []
        row_dur = []
        rid = None
        for r in range(cfg.n_revisions + 1):
            if r == 0 or rng.random() < prof.change_probability:
                if r > 0:
                    k = max(1, round(cfg.churn * len(tokens)))
                    if len(tokens) == 0:
                        tokens = fresh(1)
                    else:
                        victims = set(rng.sample(range(len(tokens)), min(k, len(tokens))))
                        repl = iter(fresh(len(victims)))
                        tokens = [next(repl) if j in victims else t for j, t in enumerate(tokens)]
                rid = f"r{len(results)}"
                results[rid] = ResultSnapshot.from_sequence(tokens) if prof.ordered else ResultSnapshot.unordered(tokens)
            row_ids.append(rid)
            factor = rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter)
            row_dur.append(max(1, round(prof.base_ms * factor)))
        ids.append(row_ids)
        durations.append(row_dur)
    return ChangeTrace.build(durations, ids, results)


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(GeneratorConfig)}
    if name not in types:
        raise GeneratorConfigError(f"unknown generator option {name!r}")
    try:
        return int(raw, 0) if types[name] == "int" else float(raw)
    except ValueError:
        raise GeneratorConfigError(f"bad value for {name}: {raw!r}") from None


def config_from_pairs(pairs: dict[str, str], base: GeneratorConfig | None = None) -> GeneratorConfig:
    values = {f.name: getattr(base or GeneratorConfig(), f.name) for f in fields(GeneratorConfig)}
    for k, v in pairs.items():
        values[k] = _coerce(k, v)
    return GeneratorConfig(**values)


def load_config(path: str | os.PathLike, base: GeneratorConfig | None = None) -> GeneratorConfig:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    pairs = {}
    for no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise GeneratorConfigError(f"{path}:{no}: expected key = value")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return config_from_pairs(pairs, base)
