from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refreshsched.trace_model import changed_set, dumps_trace, jaccard_distance, loads_trace
from refreshsched.tracegen import (
    GeneratorConfig,
    GeneratorConfigError,
    config_from_pairs,
    generate_trace,
    load_config,
    query_profiles,
)


def test_static_model_never_changes():
    t = generate_trace(GeneratorConfig(seed=1, n_queries=20, n_revisions=30, static_fraction=1.0, hot_fraction=0.0))
    assert all(changed_set(t, i) == set() for i in range(1, 31))


def test_full_churn_gives_disjoint_results():
    t = generate_trace(GeneratorConfig(seed=2, n_queries=30, n_revisions=40, churn=1.0, static_fraction=0.2))
    seen = 0
    for q in range(t.n_queries):
        for i in t.change_slots(q):
            assert jaccard_distance(t.snapshot(q, i - 1), t.snapshot(q, i)) == 1.0
            seen += 1
    assert seen > 0


def test_seed_determinism():
    cfg = GeneratorConfig(seed=42, n_queries=30, n_revisions=50)
    assert dumps_trace(generate_trace(cfg)) == dumps_trace(generate_trace(cfg))
    assert dumps_trace(generate_trace(cfg)) != dumps_trace(generate_trace(GeneratorConfig(seed=43, n_queries=30, n_revisions=50)))


def test_change_frequency_within_three_sigma():
    cfg = GeneratorConfig(seed=5, n_queries=60, n_revisions=3000, static_fraction=0.3, hot_fraction=0.2)
    t = generate_trace(cfg)
    for q, prof in enumerate(query_profiles(cfg)):
        n, p = cfg.n_revisions, prof.change_probability
        sigma = math.sqrt(n * p * (1 - p))
        assert abs(len(t.change_slots(q)) - n * p) <= 3 * sigma + 1e-9, q


@settings(max_examples=25)
@given(st.integers(0, 2**63 - 1), st.integers(1, 15), st.integers(0, 20), st.floats(0, 1), st.floats(0, 1))
def test_generated_traces_round_trip(seed, nq, nr, churn, ordered):
    t = generate_trace(GeneratorConfig(seed=seed, n_queries=nq, n_revisions=nr, churn=churn, ordered_fraction=ordered))
    assert loads_trace(dumps_trace(t)) == t


def test_invalid_configs():
    for bad in (dict(n_queries=0), dict(static_fraction=1.5), dict(min_ms=0), dict(min_ms=10, max_ms=5),
                dict(static_fraction=0.8, hot_fraction=0.3), dict(jitter=1.0), dict(seed=2**64)):
        with pytest.raises(GeneratorConfigError):
            GeneratorConfig(**bad)


def test_config_file_and_pairs(tmp_path):
    path = tmp_path / "gen.conf"
    path.write_text("# workload\nseed = 9\nn_queries=12  # small\nchurn = 0.5\n")
    cfg = load_config(path)
    assert (cfg.seed, cfg.n_queries, cfg.churn) == (9, 12, 0.5)
    assert config_from_pairs({"n_revisions": "7"}, cfg).n_revisions == 7
    with pytest.raises(GeneratorConfigError):
        config_from_pairs({"bogus": "1"})
    with pytest.raises(GeneratorConfigError):
        config_from_pairs({"seed": "x"})
