"""Offline reference alignment computed from the materialized trace.

Instead of moving cursors event by event, the oracle works on the whole trace
at once: for every aligned query node it runs a time-respecting shortest-path
sweep from the aligned entity, collects every event where a path prefix could
satisfy an out-edge, and then replays those candidates in stream order under
the same acceptance rules the streaming engine uses (first matching out-edge
in document order, first alignment of a node wins, shortest path per edge).

Only small traces are accepted; the cost grows with trace length times the
number of aligned nodes per seed instance.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Sequence

from .event_model import Entity, Event
from .query_graph import QueryGraph, search
from .scoring import edge_score

MAX_TRACE = 200


class TraceTooLarge(ValueError):
    pass


class UnsupportedGraph(ValueError):
    """The oracle only models single-seed graphs whose seed root has no in-edges."""


@dataclass
class OracleAlignment:
    seed: Entity
    start_index: int
    nodes: dict[str, Entity] = field(default_factory=dict)
    edges: dict[str, int] = field(default_factory=dict)  # edge id -> shortest path length
    score: float = 0.0

    def edge_set(self) -> frozenset:
        return frozenset(self.edges)


def _check_graph(g: QueryGraph) -> tuple[str, str | None]:
    if len(g.seeds) != 1:
        raise UnsupportedGraph(f"{g.id}: expected exactly one seed")
    s = g.seeds[0]
    root = s.node if s.node is not None else g.edges[s.edge].src
    if any(e.dst == root for e in g.edges.values()):
        raise UnsupportedGraph(f"{g.id}: seed root {root} has incoming edges")
    return root, s.edge


def _reach(trace: Sequence[Event], origin: Entity, start: int, resident_limit: float) -> list[tuple[int, int]]:
    """Events a cursor leaving ``origin`` at index ``start`` can ride.

    Returns (event index, length of the path ending with that event) for every
    event whose subject holds a resident prefix, using the shortest prefix.
    """
    dist = {origin.id: 0}
    out = []
    for j in range(start, len(trace)):
        ev = trace[j]
        d = dist.get(ev.subject.id)
        if d is None:
            continue
        n = d + 1
        out.append((j, n))
        if n <= resident_limit:
            o = ev.object.id
            cur = dist.get(o)
            if cur is None or n < cur:
                dist[o] = n
    return out


def oracle_align(trace: Sequence[Event], g: QueryGraph, max_path: int | None = None) -> list[OracleAlignment]:
    """Alignments of ``g`` over ``trace``, one per seed instance with >= 1 edge.

    ``max_path`` bounds the length of an aligning path (None = unbounded).
    """
    if len(trace) > MAX_TRACE:
        raise TraceTooLarge(f"{len(trace)} events > {MAX_TRACE}")
    root, seed_edge = _check_graph(g)
    resident_limit = math.inf if max_path is None else max_path - 1
    root_pred = g.nodes[root].predicate
    seen: set = set()
    results = []
    for i, ev in enumerate(trace):
        subj = ev.subject
        if subj.id in seen or not root_pred.matches(subj):
            continue
        if seed_edge is not None:
            e = g.edges[seed_edge]
            if (e.ops and ev.op not in e.ops) or not g.nodes[e.dst].predicate.matches(ev.object):
                continue
        seen.add(subj.id)
        res = _align_instance(trace, g, root, seed_edge, i, resident_limit)
        if res.edges:
            results.append(res)
    return results


def _align_instance(
    trace: Sequence[Event], g: QueryGraph, root: str, seed_edge: str | None, i0: int, resident_limit: float
) -> OracleAlignment:
    ev0 = trace[i0]
    res = OracleAlignment(ev0.subject, i0)
    res.nodes[root] = ev0.subject
    heap: list = []
    tie = 0

    def open_node(node: str, ent: Entity, start: int) -> None:
        nonlocal tie
        for j, n in _reach(trace, ent, start, resident_limit):
            hit = search(g, node, trace[j])
            if hit is not None:
                heapq.heappush(heap, (j, tie, hit.edge, hit.dst, n))
                tie += 1

    open_node(root, ev0.subject, i0)
    if seed_edge is not None:
        dst = g.edges[seed_edge].dst
        res.nodes[dst] = ev0.object
        res.edges[seed_edge] = 1
        open_node(dst, ev0.object, i0 + 1)

    while heap:
        j, _, eid, dst, n = heapq.heappop(heap)
        obj = trace[j].object
        have = res.nodes.get(dst)
        if have is None:
            res.nodes[dst] = obj
            open_node(dst, obj, j + 1)
        elif have.id != obj.id:
            continue
        cur = res.edges.get(eid)
        if cur is None or n < cur:
            res.edges[eid] = n
    res.score = math.fsum(edge_score(n, g.s_sink) for n in res.edges.values()) / (2 * g.edge_count)
    return res


def engine_view(statuses, g: QueryGraph) -> dict:
    """Map seed entity id -> (edge -> path length) for engine statuses of ``g``."""
    root, _ = _check_graph(g)
    out = {}
    for st in statuses:
        if st.qg != g.id or not st.edges:
            continue
        out[st.nodes[root].entity.id] = {eid: ea.path_length for eid, ea in st.edges.items()}
    return out


def oracle_view(results: Sequence[OracleAlignment]) -> dict:
    return {r.seed.id: dict(r.edges) for r in results}
