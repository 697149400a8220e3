from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tagstream.event_model import Event, make_entity
from tagstream.oracle import (
    MAX_TRACE,
    TraceTooLarge,
    UnsupportedGraph,
    engine_view,
    oracle_align,
    oracle_view,
)
from tagstream.query_graph import load_query_graph
from tagstream.tag_engine import EngineConfig, TagEngine
from tagstream.tracegen import gen_benign, random_trace


def views(trace, graphs, max_rounds=None):
    cfg = EngineConfig(max_rounds=max_rounds, decay_ms=None, per_entity_qg_cap=None)
    eng = TagEngine(graphs.values(), cfg)
    eng.run(trace)
    max_path = None if max_rounds is None else max_rounds + 1
    for g in graphs.values():
        yield g.id, engine_view(eng.live_statuses(), g), oracle_view(oracle_align(trace, g, max_path))


def test_worked_example(qg2, worked_events):
    (res,) = oracle_align(worked_events, qg2)
    assert res.edges == {"e1": 2, "e2": 1, "e3": 1}
    assert res.score == pytest.approx(5.5 / 6, abs=1e-12)
    assert res.nodes["n4"].name == "k"


def test_benign_is_empty(graphs):
    trace = gen_benign(200, 1, 7)
    for g in graphs.values():
        assert oracle_align(trace, g) == []


def test_guard():
    trace = gen_benign(MAX_TRACE + 1, 1, 0)
    g = load_query_graph(
        json.dumps(
            {"id": "T", "name": "t", "nodes": [{"id": "a"}, {"id": "b"}], "edges": [{"id": "x", "src": "a", "dst": "b"}], "seeds": [{"node": "a"}]}
        )
    )
    with pytest.raises(TraceTooLarge):
        oracle_align(trace, g)


def test_unsupported_graph():
    g = load_query_graph(
        json.dumps(
            {
                "id": "C",
                "name": "cycle",
                "nodes": [{"id": "a", "kind": "process"}, {"id": "b", "kind": "file"}],
                "edges": [{"id": "x", "src": "a", "dst": "b"}, {"id": "y", "src": "b", "dst": "a"}],
                "seeds": [{"node": "a"}],
            }
        )
    )
    with pytest.raises(UnsupportedGraph):
        oracle_align([], g)


def test_edge_seed_graph_agrees():
    g = load_query_graph(
        json.dumps(
            {
                "id": "ES",
                "name": "edge seed",
                "nodes": [
                    {"id": "a", "kind": "process", "match": {"name": "curl"}},
                    {"id": "b", "kind": "file", "match": {"name": ".*\\.sh"}},
                    {"id": "c", "kind": "process"},
                ],
                "edges": [{"id": "x", "src": "a", "dst": "b", "ops": ["write"]}, {"id": "y", "src": "b", "dst": "c", "ops": ["exec"]}],
                "seeds": [{"edge": "x"}],
            }
        )
    )
    curl = make_entity("h0", "process", {"name": "curl"})
    sh = make_entity("h0", "file", {"name": "i.sh", "path": "/tmp/i.sh"})
    pipe = make_entity("h0", "pipe", {"name": "p"})
    bash = make_entity("h0", "process", {"name": "bash"})
    trace = [Event(0, 1, curl, "write", sh), Event(1, 2, sh, "write", pipe), Event(2, 3, pipe, "exec", bash)]
    eng = TagEngine([g], EngineConfig.unbounded())
    eng.run(trace)
    assert engine_view(eng.live_statuses(), g) == oracle_view(oracle_align(trace, g)) == {curl.id: {"x": 1, "y": 2}}


def test_planted_qg2_agreement(graphs):
    qg2 = graphs["QG2"]
    checked = 0
    seed = 0
    while checked < 50:
        trace, chosen = random_trace(seed, 100)
        seed += 1
        if "QG2" not in chosen:
            continue
        eng = TagEngine([qg2], EngineConfig.unbounded())
        eng.run(trace)
        assert engine_view(eng.live_statuses(), qg2) == oracle_view(oracle_align(trace, qg2))
        checked += 1


class _NoCursorEngine(TagEngine):
    """Deliberately wrong: cursors never ride a missed event."""

    def propagate(self, tag, ev):
        saved = self.config.max_rounds
        self.config.max_rounds = len(tag.path)
        try:
            return super().propagate(tag, ev)
        finally:
            self.config.max_rounds = saved


def test_oracle_catches_a_broken_engine(graphs):
    mismatches = 0
    for seed in range(100):
        trace, _ = random_trace(seed, 120)
        eng = _NoCursorEngine(graphs.values(), EngineConfig.unbounded())
        eng.run(trace)
        for g in graphs.values():
            mismatches += engine_view(eng.live_statuses(), g) != oracle_view(oracle_align(trace, g))
    assert mismatches > 0


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_equivalence_unbounded(graphs, seed):
    trace, _ = random_trace(seed, 200)
    for gid, got, want in views(trace, graphs):
        assert got == want, gid


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 4))
def test_equivalence_round_limited(graphs, seed, max_rounds):
    trace, _ = random_trace(seed, 150)
    for gid, got, want in views(trace, graphs, max_rounds):
        assert got == want, (gid, max_rounds)
