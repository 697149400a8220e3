"""Attack query graphs: loading, validation, fuzzy node predicates and the
active-node-scoped search used while tags propagate.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, NamedTuple

from .event_model import KINDS, VERBS, Entity, Event

DEFAULT_THRESHOLD = 0.6
DEFAULT_S_SINK = 1.0

# predicate result caches are dropped wholesale past this size
_CACHE_LIMIT = 200_000


class LoadError(ValueError):
    """Raised for unusable query-graph documents.

    ``reason`` is one of ``syntax``, ``bad_pattern``, ``dangling_edge_ref`` or
    ``no_seeds``; ``ref`` names the node/edge involved, if any.
    """

    def __init__(self, reason: str, message: str, ref: str | None = None):
        self.reason = reason
        self.ref = ref
        super().__init__(f"{reason}: {message}")


@dataclass(frozen=True)
class Diagnostic:
    level: str  # "error" | "warning"
    code: str
    ref: str
    message: str

    def __str__(self) -> str:
        return f"{self.level}: {self.code}({self.ref}) {self.message}"


def normalize_pattern(pattern: str) -> str:
    """Rewrite glob-style stars into regex form.

    ``*(tar|7z)*`` becomes ``.*(tar|7z).*``; a star is only rewritten where it
    could not be a regex quantifier (pattern start, after ``(`` or ``|``) or
    where it ends the pattern right after a non-dot, non-escape character.
    """
    p = pattern
    if p.startswith("*"):
        p = "." + p
    p = p.replace("(*", "(.*").replace("|*", "|.*")
    if len(p) >= 2 and p.endswith("*") and p[-2] not in ".\\":
        p = p[:-1] + ".*"
    return p


class NodePredicate:
    """Kind constraint plus anchored, case-insensitive attribute regexes.

    A predicate with neither is a wildcard.
    """

    __slots__ = ("kind", "patterns", "_compiled", "_cache", "calls")

    # attributes folded into the entity id; only predicates over these may be memoized by id
    _IDENTITY_ATTRS = frozenset({"name", "path", "addr"})

    def __init__(self, kind: str | None = None, patterns: Mapping[str, str] | None = None):
        self.kind = kind
        self.patterns = {k: normalize_pattern(v) for k, v in (patterns or {}).items()}
        self._compiled = tuple(
            (attr, re.compile(p, re.IGNORECASE).fullmatch) for attr, p in self.patterns.items()
        )
        self._cache: dict | None = {} if set(self.patterns) <= self._IDENTITY_ATTRS else None
        self.calls = 0

    @property
    def is_wildcard(self) -> bool:
        return self.kind is None and not self.patterns

    def matches(self, entity: Entity) -> bool:
        self.calls += 1
        if self._cache is None:
            return self._evaluate(entity)
        hit = self._cache.get(entity.id)
        if hit is None:
            hit = self._evaluate(entity)
            if len(self._cache) >= _CACHE_LIMIT:
                self._cache.clear()
            self._cache[entity.id] = hit
        return hit

    def _evaluate(self, entity: Entity) -> bool:
        if self.kind is not None and entity.kind != self.kind:
            return False
        attrs = entity.attrs
        for attr, fullmatch in self._compiled:
            value = attrs.get(attr)
            if value is None or fullmatch(value) is None:
                return False
        return True

    def describe(self) -> str:
        parts = [f"[{self.kind or '*'}]"]
        parts += [f"{k}~{v}" for k, v in self.patterns.items()]
        return " ".join(parts)

    def to_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {}
        if self.kind is not None:
            doc["kind"] = self.kind
        if self.patterns:
            doc["match"] = dict(self.patterns)
        return doc

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NodePredicate):
            return NotImplemented
        return self.kind == other.kind and self.patterns == other.patterns

    def __repr__(self) -> str:
        return f"NodePredicate({self.describe()})"


def match_node(p: NodePredicate, e: Entity) -> bool:
    return p.matches(e)


@dataclass(frozen=True)
class QueryNode:
    id: str
    predicate: NodePredicate
    label: str = ""


@dataclass(frozen=True)
class QueryEdge:
    id: str
    src: str
    dst: str
    ops: frozenset  # empty = any verb

    def admits(self, op: str) -> bool:
        return not self.ops or op in self.ops


@dataclass(frozen=True)
class Seed:
    node: str | None = None
    edge: str | None = None


@dataclass(eq=False)
class QueryGraph:
    id: str
    name: str
    nodes: dict[str, QueryNode]
    edges: dict[str, QueryEdge]
    seeds: tuple[Seed, ...]
    threshold: float = DEFAULT_THRESHOLD
    s_sink: float = DEFAULT_S_SINK
    diagnostics: list[Diagnostic] = field(default_factory=list)
    # node id -> out-edges in document order, each paired with its dst predicate
    out_edges: dict[str, tuple[tuple[QueryEdge, NodePredicate], ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.out_edges:
            out: dict[str, list] = {n: [] for n in self.nodes}
            for e in self.edges.values():
                out[e.src].append((e, self.nodes[e.dst].predicate))
            self.out_edges = {n: tuple(v) for n, v in out.items()}

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @property
    def errors(self) -> list[Diagnostic]:
        return [d for d in self.diagnostics if d.level == "error"]

    def structure(self) -> tuple:
        """Hashable structural summary, used for idempotence checks."""
        return (
            self.id,
            self.name,
            self.threshold,
            self.s_sink,
            tuple((n.id, n.predicate.kind, tuple(sorted(n.predicate.patterns.items())), n.label) for n in self.nodes.values()),
            tuple((e.id, e.src, e.dst, tuple(sorted(e.ops))) for e in self.edges.values()),
            self.seeds,
        )


class SearchHit(NamedTuple):
    edge: str
    dst: str


def search(g: QueryGraph, active_node: str, ev: Event) -> SearchHit | None:
    """First out-edge of ``active_node`` (document order) admitting ``ev``.

    Only the active node's out-neighbourhood is examined.
    """
    op = ev.op
    obj = ev.object
    for edge, pred in g.out_edges[active_node]:
        if edge.ops and op not in edge.ops:
            continue
        if pred.matches(obj):
            return SearchHit(edge.id, edge.dst)
    return None


# -- loading -----------------------------------------------------------------


def _require(doc: Mapping[str, Any], key: str, typ: type, where: str) -> Any:
    if key not in doc:
        raise LoadError("syntax", f"{where} is missing {key!r}")
    val = doc[key]
    if not isinstance(val, typ):
        raise LoadError("syntax", f"{where}.{key} must be {typ.__name__}")
    return val


def _build_predicate(nd: Mapping[str, Any], nid: str) -> NodePredicate:
    kind = nd.get("kind")
    if kind is not None and kind not in KINDS:
        raise LoadError("syntax", f"node {nid} has unknown kind {kind!r}", nid)
    match = nd.get("match", {})
    if not isinstance(match, dict) or not all(isinstance(v, str) for v in match.values()):
        raise LoadError("syntax", f"node {nid}: match must map attributes to strings", nid)
    try:
        return NodePredicate(kind, match)
    except re.error as exc:
        raise LoadError("bad_pattern", f"node {nid}: {exc}", nid) from None


def graph_from_doc(doc: Mapping[str, Any]) -> QueryGraph:
    if not isinstance(doc, dict):
        raise LoadError("syntax", "query graph document must be an object")
    gid = _require(doc, "id", str, "graph")
    name = doc.get("name", gid)
    threshold = doc.get("threshold", DEFAULT_THRESHOLD)
    s_sink = doc.get("s_sink", DEFAULT_S_SINK)
    if not isinstance(threshold, (int, float)) or isinstance(threshold, bool) or not 0 < threshold <= 1:
        raise LoadError("syntax", f"threshold must lie in (0, 1], got {threshold!r}")
    if not isinstance(s_sink, (int, float)) or isinstance(s_sink, bool) or s_sink < 0:
        raise LoadError("syntax", f"s_sink must be a non-negative number, got {s_sink!r}")

    nodes: dict[str, QueryNode] = {}
    for nd in _require(doc, "nodes", list, "graph"):
        if not isinstance(nd, dict):
            raise LoadError("syntax", "node entries must be objects")
        nid = _require(nd, "id", str, "node")
        if nid in nodes:
            raise LoadError("syntax", f"duplicate node id {nid}", nid)
        nodes[nid] = QueryNode(nid, _build_predicate(nd, nid), str(nd.get("label", "")))

    edges: dict[str, QueryEdge] = {}
    seen = set()
    for ed in _require(doc, "edges", list, "graph"):
        if not isinstance(ed, dict):
            raise LoadError("syntax", "edge entries must be objects")
        eid = _require(ed, "id", str, "edge")
        src = _require(ed, "src", str, f"edge {eid}")
        dst = _require(ed, "dst", str, f"edge {eid}")
        if eid in edges or eid in nodes:
            raise LoadError("syntax", f"duplicate id {eid}", eid)
        for end in (src, dst):
            if end not in nodes:
                raise LoadError("dangling_edge_ref", f"edge {eid} references unknown node {end!r}", eid)
        if src == dst:
            raise LoadError("syntax", f"edge {eid} is a self-loop", eid)
        ops = ed.get("ops", [])
        if not isinstance(ops, list) or any(op not in VERBS for op in ops):
            raise LoadError("syntax", f"edge {eid} has unknown verbs {ops!r}", eid)
        key = (src, dst, frozenset(ops))
        if key in seen:
            raise LoadError("syntax", f"edge {eid} duplicates another edge", eid)
        seen.add(key)
        edges[eid] = QueryEdge(eid, src, dst, frozenset(ops))
    if not edges:
        raise LoadError("syntax", "a query graph needs at least one edge")

    seeds = []
    for sd in doc.get("seeds", []):
        if isinstance(sd, dict) and isinstance(sd.get("node"), str) and len(sd) == 1:
            if sd["node"] not in nodes:
                raise LoadError("dangling_edge_ref", f"seed references unknown node {sd['node']!r}", sd["node"])
            seeds.append(Seed(node=sd["node"]))
        elif isinstance(sd, dict) and isinstance(sd.get("edge"), str) and len(sd) == 1:
            if sd["edge"] not in edges:
                raise LoadError("dangling_edge_ref", f"seed references unknown edge {sd['edge']!r}", sd["edge"])
            seeds.append(Seed(edge=sd["edge"]))
        else:
            raise LoadError("syntax", f"bad seed entry {sd!r}")
    if not seeds:
        raise LoadError("no_seeds", f"graph {gid} designates no seeds")

    g = QueryGraph(gid, str(name), nodes, edges, tuple(seeds), float(threshold), float(s_sink))
    g.diagnostics = validate_query_graph(g)
    return g


def load_query_graph(document: str | bytes) -> QueryGraph:
    try:
        doc = json.loads(document)
    except ValueError as exc:
        raise LoadError("syntax", str(exc)) from None
    return graph_from_doc(doc)


def load_query_graph_file(path: str | Path) -> QueryGraph:
    return load_query_graph(Path(path).read_text(encoding="utf-8"))


def graph_to_doc(g: QueryGraph) -> dict[str, Any]:
    nodes = []
    for n in g.nodes.values():
        nd: dict[str, Any] = {"id": n.id, **n.predicate.to_doc()}
        if n.label:
            nd["label"] = n.label
        nodes.append(nd)
    edges = []
    for e in g.edges.values():
        ed: dict[str, Any] = {"id": e.id, "src": e.src, "dst": e.dst}
        if e.ops:
            ed["ops"] = sorted(e.ops)
        edges.append(ed)
    seeds = [{"node": s.node} if s.node is not None else {"edge": s.edge} for s in g.seeds]
    return {
        "id": g.id,
        "name": g.name,
        "threshold": g.threshold,
        "s_sink": g.s_sink,
        "nodes": nodes,
        "edges": edges,
        "seeds": seeds,
    }


def serialize_query_graph(g: QueryGraph) -> str:
    return json.dumps(graph_to_doc(g), indent=2, ensure_ascii=False)


def shipped_graph_paths() -> list[Path]:
    root = resources.files("tagstream") / "graphs"
    return sorted(Path(str(p)) for p in root.iterdir() if p.name.endswith(".json"))


def load_query_graphs(paths: Iterable[str | Path] | str | Path | None = None) -> list[QueryGraph]:
    """Load graphs from files and/or directories (default: the shipped samples)."""
    if paths is None:
        paths = shipped_graph_paths()
    elif isinstance(paths, (str, Path)):
        paths = [paths]
    files: list[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.glob("*.json")))
        else:
            files.append(p)
    return [load_query_graph_file(f) for f in files]


# -- validation --------------------------------------------------------------


def _seed_roots(g: QueryGraph) -> set[str]:
    roots = set()
    for s in g.seeds:
        if s.node is not None:
            roots.add(s.node)
        else:
            roots.add(g.edges[s.edge].src)
    return roots


def validate_query_graph(g: QueryGraph) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    reached = set(_seed_roots(g))
    frontier = list(reached)
    while frontier:
        n = frontier.pop()
        for e, _ in g.out_edges[n]:
            if e.dst not in reached:
                reached.add(e.dst)
                frontier.append(e.dst)
    for n in g.nodes:
        if n not in reached:
            diags.append(Diagnostic("error", "unreachable", n, "node cannot be reached from any seed"))

    for s in g.seeds:
        if s.node is not None and g.nodes[s.node].predicate.is_wildcard:
            diags.append(Diagnostic("warning", "over_general_seed", s.node, "wildcard seed node will tag every subject"))
        elif s.edge is not None:
            e = g.edges[s.edge]
            if not e.ops and g.nodes[e.src].predicate.is_wildcard and g.nodes[e.dst].predicate.is_wildcard:
                diags.append(Diagnostic("warning", "over_general_seed", s.edge, "wildcard seed edge matches every event"))

    for n in g.nodes.values():
        for attr, pat in n.predicate.patterns.items():
            if re.fullmatch(pat, "", re.IGNORECASE) is not None:
                diags.append(
                    Diagnostic("warning", "over_general_pattern", n.id, f"pattern for {attr!r} also matches the empty string")
                )
    return diags


# -- seeds -------------------------------------------------------------------


class SeedHit(NamedTuple):
    qg: str
    node: str  # the aligned node: the seed node, or the dst of a seed edge
    edge: str | None


@dataclass(frozen=True)
class SeedIndex:
    node_seeds: tuple  # (qg id, node id, predicate)
    edge_seeds: tuple  # (qg id, edge id, src predicate, ops, dst predicate, dst node id)

    @classmethod
    def build(cls, graphs: Iterable[QueryGraph]) -> SeedIndex:
        ns, es = [], []
        for g in graphs:
            for s in g.seeds:
                if s.node is not None:
                    ns.append((g.id, s.node, g.nodes[s.node].predicate))
                else:
                    e = g.edges[s.edge]
                    es.append((g.id, e.id, g.nodes[e.src].predicate, e.ops, g.nodes[e.dst].predicate, e.dst))
        return cls(tuple(ns), tuple(es))

    def node_hits(self, subject: Entity) -> list[SeedHit]:
        return [SeedHit(q, n, None) for q, n, p in self.node_seeds if p.matches(subject)]

    def edge_candidates(self, subject: Entity) -> tuple:
        """Edge seeds whose source predicate admits ``subject``."""
        return tuple(s for s in self.edge_seeds if s[2].matches(subject))


def match_seed(idx: SeedIndex, ev: Event) -> list[SeedHit]:
    """Seeds fired by ``ev``: node seeds on the subject, edge seeds on the whole event."""
    hits = idx.node_hits(ev.subject)
    for q, eid, _src, ops, dst_pred, dst in idx.edge_candidates(ev.subject):
        if (not ops or ev.op in ops) and dst_pred.matches(ev.object):
            hits.append(SeedHit(q, dst, eid))
    return hits
