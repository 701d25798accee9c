from __future__ import annotations

import itertools
import random

import pytest

from mock_endpoint import JSON, NT, XML, MockEndpoint, ask_json, select_json
from refreshsched.policies import PolicyConfig
from refreshsched.recorder import (
    EndpointConfig,
    EndpointHTTPError,
    EndpointTimeoutError,
    MalformedResponseError,
    QueryFailedError,
    QueryRegistration,
    RawResponse,
    RecorderError,
    Recording,
    Throttle,
    canonicalize_result,
    detect_form,
    dumps_query_list,
    execute_query,
    load_query_list,
    record_revision,
)
from refreshsched.metrics import compute_metrics
from refreshsched.simulator import RunConfig, run_simulation, unlimited_budget
from refreshsched.trace_model import FAILED, changed_set, load_trace, result_changed

SELECT = QueryRegistration(0, "SELECT ?x ?y WHERE { ?x ?p ?y }", "SELECT")
ORDERED = QueryRegistration(0, "SELECT ?x WHERE { ?x ?p ?y } ORDER BY ?x", "SELECT", ordered=True)
ASK = QueryRegistration(0, "ASK { ?s ?p ?o }", "ASK")
CONSTRUCT = QueryRegistration(0, "CONSTRUCT { ?s ?p ?o } WHERE { ?s ?p ?o }", "CONSTRUCT")


def raw(ctype, body):
    return RawResponse(ctype, body)


# registrations

def test_detect_form_skips_prologue():
    text = "# c\nPREFIX foaf: <http://xmlns.com/foaf/0.1/>\nBASE <http://x/>\n  describe <http://x/a>"
    assert detect_form(text) == "DESCRIBE"
    with pytest.raises(ValueError):
        detect_form("INSERT DATA {}")


def test_registration_validation():
    with pytest.raises(ValueError):
        QueryRegistration(0, "ASK {}", "SELECT")
    with pytest.raises(ValueError):
        QueryRegistration(0, "ASK {}", "ASK", ordered=True)


def test_query_list_round_trip(tmp_path):
    regs = [SELECT, QueryRegistration(1, "ASK { ?s ?p ?o }", "ASK")]
    path = tmp_path / "q.tsv"
    path.write_text(dumps_query_list(regs))
    assert load_query_list(path) == regs
    path.write_text("1\tASK\t0\tQVNLIHt9\n")
    with pytest.raises(ValueError):
        load_query_list(path)


# canonicalization

def test_ask_mapping():
    snap = canonicalize_result(raw(JSON, ask_json(True)), ASK)
    assert snap.elements == {"true"} and not snap.ordered
    xml = b'<sparql xmlns="http://www.w3.org/2005/sparql-results#"><head/><boolean>false</boolean></sparql>'
    assert canonicalize_result(raw(XML, xml), ASK).elements == {"false"}


def test_empty_select():
    assert canonicalize_result(raw(JSON, select_json([])), SELECT).elements == frozenset()


def test_key_order_irrelevant():
    a = b'{"head":{"vars":["x","y"]},"results":{"bindings":[{"x":{"type":"literal","value":"1"},"y":{"type":"literal","value":"2"}}]}}'
    b = b'{"head":{"vars":["y","x"]},"results":{"bindings":[{"y":{"type":"literal","value":"2"},"x":{"type":"literal","value":"1"}}]}}'
    assert canonicalize_result(raw(JSON, a), SELECT) == canonicalize_result(raw(JSON, b), SELECT)


def test_permuted_rows_equal_for_unordered_select():
    rows = [{"x": f"http://e/{k}", "y": str(k)} for k in range(4)]
    base = canonicalize_result(raw(JSON, select_json(rows)), SELECT)
    for perm in itertools.permutations(rows):
        assert canonicalize_result(raw(JSON, select_json(list(perm))), SELECT) == base


def test_reordered_rows_change_ordered_select():
    rows = [{"x": "a"}, {"x": "b"}]
    first = canonicalize_result(raw(JSON, select_json(rows)), ORDERED)
    second = canonicalize_result(raw(JSON, select_json(rows[::-1])), ORDERED)
    assert first.ordered and result_changed(first, second)


def test_json_and_xml_agree():
    xml = (
        b'<sparql xmlns="http://www.w3.org/2005/sparql-results#"><head/><results>'
        b'<result><binding name="x"><uri>http://e/1</uri></binding>'
        b'<binding name="y"><literal xml:lang="EN">hi</literal></binding></result>'
        b"</results></sparql>"
    )
    js = (
        b'{"head":{"vars":["x","y"]},"results":{"bindings":[{"x":{"type":"uri","value":"http://e/1"},'
        b'"y":{"type":"literal","value":"hi","xml:lang":"en"}}]}}'
    )
    a = canonicalize_result(raw(XML, xml), SELECT)
    assert a == canonicalize_result(raw(JSON, js), SELECT)
    assert a.elements == {'?x=<http://e/1> ?y="hi"@en'}


def test_literal_rendering():
    js = (
        b'{"head":{"vars":["a","b","c"]},"results":{"bindings":[{'
        b'"a":{"type":"literal","value":"s","datatype":"http://www.w3.org/2001/XMLSchema#string"},'
        b'"b":{"type":"typed-literal","value":"5","datatype":"http://www.w3.org/2001/XMLSchema#integer"},'
        b'"c":{"type":"literal","value":"q\\"\\n"}}]}}'
    )
    (tok,) = canonicalize_result(raw(JSON, js), SELECT).elements
    assert tok == '?a="s" ?b="5"^^<http://www.w3.org/2001/XMLSchema#integer> ?c="q\\"\\n"'


def _ntriples(triples):
    return "".join(f"{s} {p} {o} .\n" for s, p, o in triples).encode()


def test_blank_node_relabeling_enumeration():
    # an acyclic single-component shape: x -> b1 -> b2, b1 has a literal too
    shape = [
        ("<http://e/x>", "<http://e/p>", "{0}"),
        ("{0}", "<http://e/q>", "{1}"),
        ("{0}", "<http://e/r>", '"v"'),
        ("{1}", "<http://e/r>", '"w"'),
    ]
    snaps = set()
    for labels in itertools.permutations(["_:a", "_:b", "_:zz"], 2):
        concrete = [tuple(term.format(*labels) for term in t) for t in shape]
        for order in itertools.permutations(concrete):
            snaps.add(canonicalize_result(raw(NT, _ntriples(order)), CONSTRUCT))
    assert len(snaps) == 1
    other = [tuple(term.format("_:a", "_:b") for term in t) for t in shape[:3]]
    assert canonicalize_result(raw(NT, _ntriples(other)), CONSTRUCT) not in snaps


def test_swapped_bnode_names():
    a = _ntriples([("_:a", "<http://e/p>", "_:b"), ("_:b", "<http://e/q>", '"1"')])
    b = _ntriples([("_:b", "<http://e/p>", "_:a"), ("_:a", "<http://e/q>", '"1"')])
    assert canonicalize_result(raw(NT, a), CONSTRUCT) == canonicalize_result(raw(NT, b), CONSTRUCT)


def test_malformed_bodies():
    with pytest.raises(MalformedResponseError):
        canonicalize_result(raw(JSON, b"{not json"), SELECT)
    with pytest.raises(MalformedResponseError):
        canonicalize_result(raw(XML, b"<sparql"), SELECT)
    with pytest.raises(MalformedResponseError):
        canonicalize_result(raw(NT, b"<a> <b> .\n"), CONSTRUCT)
    with pytest.raises(MalformedResponseError):
        canonicalize_result(raw(JSON, ask_json(True)), SELECT)
    with pytest.raises(MalformedResponseError):
        canonicalize_result(raw(JSON, select_json([])), CONSTRUCT)


def test_canonicalization_deterministic():
    rng = random.Random(0)
    for _ in range(50):
        rows = [{"x": str(rng.randint(0, 5)), "y": f"http://e/{rng.randint(0, 5)}"} for _ in range(rng.randint(0, 6))]
        body = select_json(rows)
        assert canonicalize_result(raw(JSON, body), SELECT) == canonicalize_result(raw(JSON, body), SELECT)


# throttle

def test_throttle_with_fake_clock():
    now = [0.0]
    sleeps = []

    def sleep(s):
        sleeps.append(s)
        now[0] += s

    th = Throttle(250, clock=lambda: now[0], sleep=sleep)
    th.wait()
    now[0] += 0.1
    th.wait()
    th.wait()
    assert sleeps == pytest.approx([0.15, 0.25])


# transport against the mock endpoint

def test_fixed_table_twice_same_fingerprint():
    rows = [{"x": "1"}, {"x": "2"}, {"x": "3"}]
    with MockEndpoint({SELECT.query_text: [(200, JSON, select_json(rows))]}) as ep:
        cfg = EndpointConfig(ep.url)
        s1, d1 = execute_query(cfg, SELECT)
        s2, _ = execute_query(cfg, SELECT)
    assert s1 == s2 and len(s1.elements) == 3 and d1 >= 1


def test_post_method():
    with MockEndpoint({ASK.query_text: [(200, JSON, ask_json(False))]}) as ep:
        snap, _ = execute_query(EndpointConfig(ep.url, method="POST"), ASK)
        assert ep.requests[0][1] == "POST"
    assert snap.elements == {"false"}


def test_http_error_retried_then_fails():
    with MockEndpoint({ASK.query_text: [(500, "text/plain", b"boom")]}) as ep:
        with pytest.raises(QueryFailedError) as info:
            execute_query(EndpointConfig(ep.url, max_retries=2), ASK)
        assert len(ep.requests) == 3
    assert isinstance(info.value.cause, EndpointHTTPError) and info.value.cause.status == 500


def test_retry_recovers():
    replies = [(503, "text/plain", b""), (200, JSON, ask_json(True))]
    with MockEndpoint({ASK.query_text: replies}) as ep:
        snap, _ = execute_query(EndpointConfig(ep.url, max_retries=1), ASK)
    assert snap.elements == {"true"}


def test_timeout_is_typed():
    with MockEndpoint({ASK.query_text: [(200, JSON, ask_json(True))]}, delay_s=0.5) as ep:
        with pytest.raises(QueryFailedError) as info:
            execute_query(EndpointConfig(ep.url, timeout_ms=100, max_retries=0), ASK)
    assert isinstance(info.value.cause, EndpointTimeoutError)


def test_unreachable_endpoint():
    with pytest.raises(QueryFailedError) as info:
        execute_query(EndpointConfig("http://127.0.0.1:9/sparql", timeout_ms=500, max_retries=0), ASK)
    assert isinstance(info.value.cause, RecorderError)


def test_polite_delay_between_requests():
    script = {SELECT.query_text: [(200, JSON, select_json([]))]}
    with MockEndpoint(script) as ep:
        cfg = EndpointConfig(ep.url, delay_ms=80)
        th = Throttle(cfg.delay_ms)
        for _ in range(4):
            execute_query(cfg, SELECT, th)
        times = [t for t, _, _ in ep.requests]
    assert all(b - a >= 0.08 - 0.005 for a, b in zip(times, times[1:]))


# recording

def two_queries():
    return [
        QueryRegistration(0, "SELECT ?x WHERE { ?x ?p ?o }", "SELECT"),
        QueryRegistration(1, "ASK { ?s ?p ?o }", "ASK"),
    ]


def test_record_revisions_and_stability(tmp_path):
    regs = two_queries()
    script = {
        regs[0].query_text: [(200, JSON, select_json([{"x": "1"}, {"x": "2"}]))],
        regs[1].query_text: [(200, JSON, ask_json(True))],
    }
    with MockEndpoint(script) as ep:
        rec = Recording.open(tmp_path / "j", 2)
        t0 = record_revision(EndpointConfig(ep.url), regs, rec, trace_path=tmp_path / "t.trace")
        t1 = record_revision(EndpointConfig(ep.url), regs, rec, trace_path=tmp_path / "t.trace")
    assert (t0.n_revisions, t1.n_revisions) == (0, 1)
    assert changed_set(t1, 1) == set()
    assert load_trace(tmp_path / "t.trace") == t1


def test_failure_becomes_sentinel(tmp_path):
    regs = two_queries()
    script = {
        regs[0].query_text: [(200, JSON, select_json([{"x": "1"}]))] * 2 + [(200, JSON, select_json([{"x": "9"}]))],
        regs[1].query_text: [(200, JSON, ask_json(True)), (500, "text/plain", b"down")],
    }
    with MockEndpoint(script) as ep:
        cfg = EndpointConfig(ep.url, max_retries=1)
        rec = Recording.open(tmp_path / "j", 2)
        record_revision(cfg, regs, rec)
        t = record_revision(cfg, regs, rec)
    assert t.result_ids[1][1] == FAILED
    assert t.result_ids[0][1] != FAILED
    log = run_simulation(RunConfig(PolicyConfig("RR"), unlimited_budget(t), t))
    assert [o.failed for o in log.observations] == [False, True]


def test_initial_revision_failure_aborts(tmp_path):
    regs = two_queries()
    script = {regs[0].query_text: [(200, JSON, select_json([]))], regs[1].query_text: [(500, "text/plain", b"")]}
    with MockEndpoint(script) as ep:
        rec = Recording.open(tmp_path / "j", 2)
        with pytest.raises(QueryFailedError):
            record_revision(EndpointConfig(ep.url, max_retries=0), regs, rec)
    assert rec.n_revisions_recorded == 0
    assert Recording.open(tmp_path / "j", 2).n_revisions_recorded == 0


def test_journal_resume_discards_torn_revision(tmp_path):
    regs = two_queries()
    script = {
        regs[0].query_text: [(200, JSON, select_json([{"x": "1"}]))],
        regs[1].query_text: [(200, JSON, ask_json(True))],
    }
    path = tmp_path / "j"
    with MockEndpoint(script) as ep:
        cfg = EndpointConfig(ep.url)
        rec = Recording.open(path, 2)
        record_revision(cfg, regs, rec)
        record_revision(cfg, regs, rec)
        committed = path.read_text()
        with open(path, "a") as fh:
            fh.write("R r9 ordered=0\tzz\nE 0 2 5 r9\nE 1 2")
        again = Recording.open(path, 2)
        assert again.n_revisions_recorded == 2
        assert path.read_text() == committed
        t = record_revision(cfg, regs, again)
    assert t.n_revisions == 2 and changed_set(t, 2) == set()
    with pytest.raises(RecorderError):
        Recording.open(path, 3)


def test_recorded_trace_runs_end_to_end(tmp_path):
    regs = [
        QueryRegistration(0, "SELECT ?x WHERE { ?x ?p ?o }", "SELECT"),
        QueryRegistration(1, "SELECT ?x WHERE { ?x ?p ?o } ORDER BY ?x", "SELECT", ordered=True),
        QueryRegistration(2, "CONSTRUCT { ?s ?p ?o } WHERE { ?s ?p ?o }", "CONSTRUCT"),
    ]
    rows = [{"x": "a"}, {"x": "b"}, {"x": "c"}]
    script = {
        regs[0].query_text: [(200, JSON, select_json(p)) for p in (rows, rows[::-1], rows[1:] + rows[:1])],
        regs[1].query_text: [(200, JSON, select_json(p)) for p in (rows, rows[::-1], rows[::-1])],
        regs[2].query_text: [(200, NT, _ntriples([("_:n", "<http://e/p>", '"1"')])),
                             (200, NT, _ntriples([("_:m", "<http://e/p>", '"1"')])),
                             (200, NT, _ntriples([("_:m", "<http://e/p>", '"2"')]))],
    }
    with MockEndpoint(script) as ep:
        rec = Recording.open(tmp_path / "j", 3)
        for _ in range(3):
            record_revision(EndpointConfig(ep.url), regs, rec, trace_path=tmp_path / "t.trace")
    t = load_trace(tmp_path / "t.trace")
    assert changed_set(t, 1) == {1}
    assert changed_set(t, 2) == {2}
    m = compute_metrics(run_simulation(RunConfig(PolicyConfig("DJ"), unlimited_budget(t), t)), t)
    assert m.relevant == 2 and m.abs_miss == 0
