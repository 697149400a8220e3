"""Streaming tag propagation over a provenance event stream.

Tags are per-entity cursors (active query node plus the path walked since the
last alignment). Every tag points at a shared AlignmentStatus which collects
aligned nodes and edges across all branches of one alignment, so sibling
branches contribute to a single score and a single alert.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple

from .event_model import Entity, EntityId, Event
from .query_graph import QueryGraph, SeedIndex, search
from .scoring import Alert, build_alert, crosses, edge_score, graph_score

DEFAULT_MAX_ROUNDS = 6
DEFAULT_DECAY_MS = 4 * 3600 * 1000
DEFAULT_CAP = 4

_SEED_CACHE_LIMIT = 1_000_000


class MergeMismatch(ValueError):
    """Tags of different query graphs cannot be merged."""


class MergeConflict(ValueError):
    """Two statuses align some query node to different entities."""


class NodeAlignment(NamedTuple):
    entity: Entity
    score: float | None  # None marks an unscored seed node
    ts: int


class EdgeAlignment(NamedTuple):
    path: tuple[Event, ...]
    path_length: int
    s_ei: float


class AlignmentUpdate(NamedTuple):
    edge: str
    dst: str
    path_length: int
    s_ei: float
    score: float


_status_ids = itertools.count(1)
_tag_ids = itertools.count(1)


class AlignmentStatus:
    """Aligned nodes/edges shared by every tag of one alignment."""

    __slots__ = ("status_id", "qg", "nodes", "edges", "created_ts", "alerted", "score", "alert_score", "refs", "forward")

    def __init__(self, qg: str, created_ts: int):
        self.status_id = next(_status_ids)
        self.qg = qg
        self.nodes: dict[str, NodeAlignment] = {}
        self.edges: dict[str, EdgeAlignment] = {}
        self.created_ts = created_ts
        self.alerted = False
        self.score = 0.0
        self.alert_score = 0.0
        self.refs = 0
        # set once this status has been merged into another one
        self.forward: AlignmentStatus | None = None

    def resolve(self) -> AlignmentStatus:
        st = self
        while st.forward is not None:
            st = st.forward
        return st

    def edge_set(self) -> frozenset:
        return frozenset(self.edges)

    def __repr__(self) -> str:
        return f"AlignmentStatus(#{self.status_id} {self.qg} nodes={sorted(self.nodes)} edges={sorted(self.edges)})"


class Tag:
    __slots__ = ("tag_id", "graph", "active", "path", "_status", "last_align_ts")

    def __init__(self, graph: QueryGraph, active: str, path: tuple, status: AlignmentStatus, last_align_ts: int):
        self.tag_id = next(_tag_ids)
        self.graph = graph
        self.active = active
        self.path = path
        self._status = status
        self.last_align_ts = last_align_ts

    @property
    def qg(self) -> str:
        return self.graph.id

    @property
    def status(self) -> AlignmentStatus:
        st = self._status
        if st.forward is not None:
            st = st.resolve()
            self._status = st
        return st

    def __repr__(self) -> str:
        return f"Tag(#{self.tag_id} {self.graph.id} active={self.active} path={len(self.path)})"


def is_out_dated(tag: Tag, now_ms: int, decay_ms: int | None = DEFAULT_DECAY_MS) -> bool:
    return decay_ms is not None and now_ms - tag.last_align_ts > decay_ms


def is_out_rounded(tag: Tag, max_rounds: int | None = DEFAULT_MAX_ROUNDS) -> bool:
    return max_rounds is not None and len(tag.path) > max_rounds


def compatible(a: AlignmentStatus, b: AlignmentStatus) -> bool:
    """No query node is aligned to different entities in ``a`` and ``b``."""
    if len(a.nodes) > len(b.nodes):
        a, b = b, a
    other = b.nodes
    for nid, na in a.nodes.items():
        nb = other.get(nid)
        if nb is not None and nb.entity.id != na.entity.id:
            return False
    return True


def _node_better(x: NodeAlignment, y: NodeAlignment) -> bool:
    if x.score is None:
        return False
    return y.score is None or x.score > y.score


def merge_statuses(a: AlignmentStatus, b: AlignmentStatus) -> AlignmentStatus:
    """Fold the younger status into the older one and return the survivor.

    Per node and per edge the higher-scoring alignment wins; ties keep the
    older status's entry. The absorbed status forwards to the survivor.
    """
    a, b = a.resolve(), b.resolve()
    if a is b:
        return a
    if a.qg != b.qg:
        raise MergeMismatch(f"{a.qg} vs {b.qg}")
    if not compatible(a, b):
        raise MergeConflict(f"statuses #{a.status_id} and #{b.status_id} disagree on a node")
    keep, gone = (a, b) if (a.created_ts, a.status_id) <= (b.created_ts, b.status_id) else (b, a)
    for nid, nb in gone.nodes.items():
        nk = keep.nodes.get(nid)
        if nk is None or _node_better(nb, nk):
            keep.nodes[nid] = nb
    for eid, eb in gone.edges.items():
        ek = keep.edges.get(eid)
        if ek is None or eb.s_ei > ek.s_ei:
            keep.edges[eid] = eb
    keep.alerted = keep.alerted or gone.alerted
    keep.alert_score = max(keep.alert_score, gone.alert_score)
    keep.refs += gone.refs
    gone.refs = 0
    gone.forward = keep
    return keep


def merge_tags(a: Tag, b: Tag) -> Tag:
    """Merge two co-resident tags of one query graph into a new tag.

    The cursor (active node, cached path) comes from whichever input scored
    higher before the merge, ``a`` on ties.
    """
    if a.graph.id != b.graph.id:
        raise MergeMismatch(f"{a.graph.id} vs {b.graph.id}")
    g = a.graph
    sa, sb = a.status, b.status
    lead = a if graph_score(sa, g) >= graph_score(sb, g) else b
    st = merge_statuses(sa, sb)
    st.score = graph_score(st, g)
    return Tag(g, lead.active, lead.path, st, max(a.last_align_ts, b.last_align_ts))


@dataclass
class EngineConfig:
    max_rounds: int | None = DEFAULT_MAX_ROUNDS
    decay_ms: int | None = DEFAULT_DECAY_MS
    per_entity_qg_cap: int | None = DEFAULT_CAP
    # emit an extra alert line whenever an already-alerted status improves
    alert_updates: bool = False

    @classmethod
    def unbounded(cls) -> EngineConfig:
        """No decay, no round limit, no cap: pure reachability semantics."""
        return cls(max_rounds=None, decay_ms=None, per_entity_qg_cap=None)


@dataclass
class Counters:
    events: int = 0
    tags_initialized: int = 0
    tags_propagated: int = 0
    tags_removed: int = 0
    alerts: int = 0

    @property
    def active_tags(self) -> int:
        return self.tags_initialized + self.tags_propagated - self.tags_removed

    def as_dict(self) -> dict[str, int]:
        return {
            "events": self.events,
            "tags_initialized": self.tags_initialized,
            "tags_propagated": self.tags_propagated,
            "tags_removed": self.tags_removed,
            "active_tags": self.active_tags,
            "alerts": self.alerts,
        }


class TagEngine:
    """Entity-to-tag cache plus the per-event propagation loop for one partition."""

    def __init__(
        self,
        graphs: Iterable[QueryGraph],
        config: EngineConfig | None = None,
        thresholds: float | Mapping[str, float] | None = None,
    ):
        self.graphs = {g.id: g for g in graphs}
        self.index = SeedIndex.build(self.graphs.values())
        self.config = config or EngineConfig()
        self.thresholds = {}
        for gid, g in self.graphs.items():
            if isinstance(thresholds, (int, float)):
                self.thresholds[gid] = float(thresholds)
            elif thresholds is not None and gid in thresholds:
                self.thresholds[gid] = float(thresholds[gid])
            else:
                self.thresholds[gid] = g.threshold
        self.tags: dict[EntityId, list[Tag]] = {}
        self.statuses: dict[int, AlignmentStatus] = {}
        self.counters = Counters()
        self._seed_cache: dict = {}
        self._alerts: list[Alert] = []
        self._ev: Event | None = None
        self._merged = False
        # expiry index: bucket of last_align_ts -> entities holding such a tag
        decay = self.config.decay_ms
        self._bucket_ms = max(1, decay // 64) if decay is not None else None
        self._buckets: dict[int, set] = {}

    # -- main loop -------------------------------------------------------------

    def process_event(self, ev: Event) -> list[Alert]:
        self.counters.events += 1
        subj = ev.subject
        sid = subj.id
        seeds = self._seed_cache.get(sid)
        if seeds is None:
            seeds = self._seed_lookup(subj)
        tags = self.tags.get(sid)
        if tags is None and not seeds:
            return []
        self._ev = ev
        if tags is not None and self.config.decay_ms is not None:
            self._expire_entity(sid, tags, ev.ts)
        if seeds:
            self._initialize(ev, seeds)
        tags = self.tags.get(sid)
        if tags:
            if self._merged:
                self._dedupe(sid, tags)
            for tag in tuple(tags):
                self.propagate(tag, ev)
        if not self._alerts:
            return []
        out, self._alerts = self._alerts, []
        return out

    def run(self, events: Iterable[Event]) -> list[Alert]:
        out: list[Alert] = []
        for ev in events:
            out.extend(self.process_event(ev))
        return out

    def _seed_lookup(self, subj: Entity) -> tuple:
        node_hits = tuple((self.graphs[h.qg], h.node) for h in self.index.node_hits(subj))
        edge_cands = self.index.edge_candidates(subj)
        seeds = (node_hits, edge_cands) if node_hits or edge_cands else ()
        if len(self._seed_cache) >= _SEED_CACHE_LIMIT:
            self._seed_cache.clear()
        self._seed_cache[subj.id] = seeds
        return seeds

    def _seeded(self, ent: Entity, g: QueryGraph, node: str) -> bool:
        for t in self.tags.get(ent.id, ()):
            if t.graph is g:
                na = t.status.nodes.get(node)
                if na is not None and na.entity.id == ent.id:
                    return True
        return False

    def _new_status(self, g: QueryGraph, ts: int) -> AlignmentStatus:
        st = AlignmentStatus(g.id, ts)
        self.statuses[st.status_id] = st
        return st

    def _initialize(self, ev: Event, seeds: tuple) -> None:
        node_hits, edge_cands = seeds
        subj = ev.subject
        ts = ev.ts
        for g, node in node_hits:
            if self._seeded(subj, g, node):
                continue
            st = self._new_status(g, ts)
            st.nodes[node] = NodeAlignment(subj, None, ts)
            self._insert(subj.id, Tag(g, node, (), st, ts), initialized=True)
        obj = ev.object
        for gid, eid, _src_pred, ops, dst_pred, dst in edge_cands:
            if (ops and ev.op not in ops) or not dst_pred.matches(obj):
                continue
            g = self.graphs[gid]
            src = g.edges[eid].src
            if self._seeded(subj, g, src):
                continue
            st = self._new_status(g, ts)
            st.nodes[src] = NodeAlignment(subj, None, ts)
            st.nodes[dst] = NodeAlignment(obj, g.s_sink, ts)
            st.edges[eid] = EdgeAlignment((ev,), 1, edge_score(1, g.s_sink))
            self._insert(subj.id, Tag(g, src, (), st, ts), initialized=True)
            self._insert(obj.id, Tag(g, dst, (), st, ts), initialized=True)
            self._rescore(st, g)

    def propagate(self, tag: Tag, ev: Event) -> AlignmentUpdate | None:
        """Clone ``tag`` along ``ev``; the original stays where it is.

        On an accepted hit an aligned clone (empty path) lands on the object.
        Independently, a cursor clone keeping the old active node and the grown
        path also lands there unless it exceeds the round limit.
        """
        self._ev = ev
        g = tag.graph
        st = tag.status
        path = tag.path + (ev,)
        obj = ev.object
        update = None
        hit = search(g, tag.active, ev)
        if hit is not None:
            dst = hit.dst
            na = st.nodes.get(dst)
            if na is None:
                st.nodes[dst] = NodeAlignment(obj, g.s_sink, ev.ts)
                accepted = True
            else:
                accepted = na.entity.id == obj.id
            if accepted:
                n = len(path)
                ea = st.edges.get(hit.edge)
                if ea is None or n < ea.path_length:
                    s = edge_score(n, g.s_sink)
                    st.edges[hit.edge] = EdgeAlignment(path, n, s)
                    self._rescore(st, g)
                    update = AlignmentUpdate(hit.edge, dst, n, s, st.score)
                self._insert(obj.id, Tag(g, dst, (), st, ev.ts))
        mr = self.config.max_rounds
        if mr is None or len(path) <= mr:
            self._insert(obj.id, Tag(g, tag.active, path, st, tag.last_align_ts))
        return update

    # -- cache maintenance -------------------------------------------------------

    def _insert(self, ent_id: EntityId, tag: Tag, initialized: bool = False) -> None:
        lst = self.tags.get(ent_id)
        if lst is None:
            self.tags[ent_id] = [tag]
            self._admit(ent_id, tag, initialized)
            return
        g = tag.graph
        merged = False
        peers = 0
        for i, r in enumerate(lst):
            if r.graph is not g:
                continue
            rs = r.status
            st = tag.status
            if rs is not st:
                if not compatible(rs, st):
                    peers += 1
                    continue
                self._merge(rs, st, g)
                merged = True
            if r.active == tag.active:
                if len(tag.path) < len(r.path):
                    tag.last_align_ts = max(tag.last_align_ts, r.last_align_ts)
                    lst[i] = tag
                    self._admit(ent_id, tag, initialized)
                    self._release(r)
                else:
                    if tag.last_align_ts > r.last_align_ts:
                        r.last_align_ts = tag.last_align_ts
                        self._touch(ent_id, r.last_align_ts)
                if merged:
                    self._dedupe(ent_id, lst)
                return
            peers += 1
        lst.append(tag)
        self._admit(ent_id, tag, initialized)
        if merged:
            self._dedupe(ent_id, lst)
        cap = self.config.per_entity_qg_cap
        if cap is not None and peers + 1 > cap:
            self._evict(lst, g, cap)

    def _admit(self, ent_id: EntityId, tag: Tag, initialized: bool) -> None:
        if initialized:
            self.counters.tags_initialized += 1
        else:
            self.counters.tags_propagated += 1
        tag.status.refs += 1
        self._touch(ent_id, tag.last_align_ts)

    def _touch(self, ent_id: EntityId, ts: int) -> None:
        if self._bucket_ms is None:
            return
        b = ts // self._bucket_ms
        bucket = self._buckets.get(b)
        if bucket is None:
            self._buckets[b] = {ent_id}
        else:
            bucket.add(ent_id)

    def _release(self, tag: Tag) -> None:
        self.counters.tags_removed += 1
        st = tag.status
        st.refs -= 1
        if st.refs <= 0 and not st.alerted:
            self.statuses.pop(st.status_id, None)

    def _merge(self, a: AlignmentStatus, b: AlignmentStatus, g: QueryGraph) -> AlignmentStatus:
        keep = merge_statuses(a, b)
        gone = b if keep is a else a
        self.statuses.pop(gone.status_id, None)
        self._merged = True
        self._rescore(keep, g)
        return keep

    def _dedupe(self, ent_id: EntityId, lst: list[Tag]) -> None:
        """Collapse tags sharing (status, active node), keeping the shortest path."""
        best: dict = {}
        drop = []
        for t in lst:
            key = (t.status.status_id, t.active)
            cur = best.get(key)
            if cur is None:
                best[key] = t
            elif len(t.path) < len(cur.path):
                t.last_align_ts = max(t.last_align_ts, cur.last_align_ts)
                best[key] = t
                drop.append(cur)
            else:
                cur.last_align_ts = max(cur.last_align_ts, t.last_align_ts)
                drop.append(t)
        if drop:
            gone = {id(t) for t in drop}
            lst[:] = [t for t in lst if id(t) not in gone]
            for t in drop:
                self._release(t)
            if self._bucket_ms is not None:
                for t in lst:
                    self._touch(ent_id, t.last_align_ts)

    def _evict(self, lst: list[Tag], g: QueryGraph, cap: int) -> None:
        peers = [t for t in lst if t.graph is g]
        peers.sort(key=lambda t: (t.status.score, t.tag_id))
        for victim in peers[: len(peers) - cap]:
            lst.remove(victim)
            self._release(victim)

    def _expire_entity(self, ent_id: EntityId, tags: list[Tag], now: int) -> int:
        # cursors never rest beyond the round limit (clones past it are not
        # inserted), so only the time predicate needs checking here
        decay = self.config.decay_ms
        if decay is None:
            return 0
        cutoff = now - decay
        for t in tags:
            if t.last_align_ts < cutoff:
                break
        else:
            return 0
        keep = [t for t in tags if t.last_align_ts >= cutoff]
        gone = [t for t in tags if t.last_align_ts < cutoff]
        if keep:
            tags[:] = keep
        else:
            del self.tags[ent_id]
        for t in gone:
            self._release(t)
        return len(gone)

    def sweep_expired(self, now_ms: int) -> int:
        """Drop every out-dated resident; returns how many went.

        Only entities indexed under an expiry bucket that reaches past the
        cutoff are visited.
        """
        width = self._bucket_ms
        if width is None:
            return 0
        cutoff = now_ms - self.config.decay_ms
        removed = 0
        for b in sorted(k for k in self._buckets if k * width < cutoff):
            ents = self._buckets[b]
            for ent_id in ents:
                tags = self.tags.get(ent_id)
                if tags is not None:
                    removed += self._expire_entity(ent_id, tags, now_ms)
            if (b + 1) * width <= cutoff:
                del self._buckets[b]
        return removed

    def audit_expired(self, now_ms: int) -> int:
        """Residents that violate a decay predicate at ``now_ms`` (0 right after a sweep)."""
        decay, mr = self.config.decay_ms, self.config.max_rounds
        return sum(
            1 for tags in self.tags.values() for t in tags if is_out_dated(t, now_ms, decay) or is_out_rounded(t, mr)
        )

    # -- scoring -------------------------------------------------------------------

    def _rescore(self, st: AlignmentStatus, g: QueryGraph) -> None:
        score = graph_score(st, g)
        st.score = score
        ev = self._ev
        if not st.alerted:
            if crosses(score, self.thresholds[g.id]):
                st.alerted = True
                st.alert_score = score
                self.counters.alerts += 1
                self._alerts.append(build_alert(st, g, ev.host if ev else "", ev.ts if ev else 0))
        elif self.config.alert_updates and score > st.alert_score:
            st.alert_score = score
            self._alerts.append(build_alert(st, g, ev.host if ev else "", ev.ts if ev else 0, update=True))

    # -- introspection -------------------------------------------------------------

    def resident_tags(self) -> int:
        return sum(len(v) for v in self.tags.values())

    def live_statuses(self) -> list[AlignmentStatus]:
        return [s for s in self.statuses.values() if s.forward is None]

    def tags_on(self, ent: Entity | EntityId) -> list[Tag]:
        key = ent.id if isinstance(ent, Entity) else ent
        return list(self.tags.get(key, ()))


def process_event(engine: TagEngine, ev: Event) -> list[Alert]:
    return engine.process_event(ev)


def propagate_tag(engine: TagEngine, tag: Tag, ev: Event) -> AlignmentUpdate | None:
    return engine.propagate(tag, ev)


def sweep_expired(engine: TagEngine, now_ms: int) -> int:
    return engine.sweep_expired(now_ms)
