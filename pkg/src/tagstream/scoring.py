"""Alignment scoring, alert triggering and alert rendering."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from .query_graph import QueryGraph
    from .tag_engine import AlignmentStatus

# absorbs float noise so that e.g. three edges at 1.2 still reach 0.6
_EPS = 1e-12


class InvalidPathLength(ValueError):
    pass


def edge_score(path_length: int, s_sink: float = 1.0) -> float:
    """Sink credit plus the reciprocal of the path length."""
    if path_length < 1:
        raise InvalidPathLength(f"path length must be >= 1, got {path_length}")
    return s_sink + 1.0 / path_length


def graph_score(status: AlignmentStatus, g: QueryGraph) -> float:
    """Sum of aligned edge scores over twice the edge count; unaligned edges add 0."""
    total = math.fsum(ea.s_ei for ea in status.edges.values())
    return total / (2 * g.edge_count)


def crosses(score: float, threshold: float) -> bool:
    return score + _EPS >= threshold


def should_alert(status: AlignmentStatus, g: QueryGraph, score: float, threshold: float | None = None) -> bool:
    """True on the first threshold crossing only; the caller marks the status."""
    if status.alerted:
        return False
    return crosses(score, g.threshold if threshold is None else threshold)


def _num(x: float | None) -> str:
    return "-" if x is None else format(x, ".6g")


@dataclass(frozen=True)
class NodeRow:
    id: str
    predicate: str
    entity: str
    kind: str
    score: float | None


@dataclass(frozen=True)
class EdgeRow:
    id: str
    src: str
    dst: str
    path: tuple[dict, ...]
    path_length: int
    s_ei: float


@dataclass(frozen=True)
class Alert:
    qg: str
    name: str
    host: str
    score: float
    trigger_ts: int
    nodes: tuple[NodeRow, ...]
    edges: tuple[EdgeRow, ...]
    edge_count: int
    seed_entity: str = ""
    update: bool = False

    @property
    def edge_sum(self) -> float:
        return math.fsum(e.s_ei for e in self.edges)

    def edge_scores(self) -> dict[str, float]:
        return {e.id: e.s_ei for e in self.edges}

    def to_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "qg": self.qg,
            "name": self.name,
            "host": self.host,
            "score": self.score,
            "trigger_ts": self.trigger_ts,
            "nodes": [
                {"id": n.id, "predicate": n.predicate, "entity": n.entity, "kind": n.kind, "score": n.score}
                for n in self.nodes
            ],
            "edges": [
                {
                    "id": e.id,
                    "src": e.src,
                    "dst": e.dst,
                    "path": list(e.path),
                    "path_length": e.path_length,
                    "s_ei": e.s_ei,
                }
                for e in self.edges
            ],
        }
        if self.seed_entity:
            doc["seed"] = self.seed_entity
        if self.update:
            doc["update"] = True
        return doc


def build_alert(status: AlignmentStatus, g: QueryGraph, host: str, trigger_ts: int, update: bool = False) -> Alert:
    nodes = []
    for qn in g.nodes.values():
        na = status.nodes.get(qn.id)
        if na is None:
            continue
        nodes.append(NodeRow(qn.id, qn.predicate.describe(), na.entity.display(), na.entity.kind, na.score))
    edges = []
    for qe in g.edges.values():
        ea = status.edges.get(qe.id)
        if ea is None:
            continue
        path = tuple(
            {"ts": ev.ts, "subj": ev.subject.display(), "op": ev.op, "obj": ev.object.display()} for ev in ea.path
        )
        edges.append(EdgeRow(qe.id, qe.src, qe.dst, path, ea.path_length, ea.s_ei))
    seed = ""
    for s in g.seeds:
        root = s.node if s.node is not None else g.edges[s.edge].src
        na = status.nodes.get(root)
        if na is not None:
            seed = na.entity.display()
            break
    return Alert(
        qg=g.id,
        name=g.name,
        host=host,
        score=graph_score(status, g),
        trigger_ts=trigger_ts,
        nodes=tuple(nodes),
        edges=tuple(edges),
        edge_count=g.edge_count,
        seed_entity=seed,
        update=update,
    )


def alert_from_doc(doc: dict[str, Any]) -> Alert:
    """Inverse of ``Alert.to_doc`` (used when re-reading an alerts file)."""
    nodes = tuple(NodeRow(n["id"], n["predicate"], n["entity"], n.get("kind", ""), n["score"]) for n in doc["nodes"])
    edges = tuple(
        EdgeRow(e["id"], e["src"], e["dst"], tuple(e["path"]), e["path_length"], e["s_ei"]) for e in doc["edges"]
    )
    return Alert(
        qg=doc["qg"],
        name=doc["name"],
        host=doc["host"],
        score=doc["score"],
        trigger_ts=doc["trigger_ts"],
        nodes=nodes,
        edges=edges,
        edge_count=0,
        seed_entity=doc.get("seed", ""),
        update=doc.get("update", False),
    )


def _path_text(path: tuple[dict, ...]) -> str:
    return " ".join(f"({p['subj']} -{p['op']}-> {p['obj']})" for p in path)


def render_table(alert: Alert) -> str:
    rows = [("ID", "Properties", "Aligned Result", "Score")]
    for n in alert.nodes:
        rows.append((n.id, n.predicate, n.entity, _num(n.score)))
    for e in alert.edges:
        rows.append((e.id, f"{e.src}->{e.dst}", _path_text(e.path), _num(e.s_ei)))
    total = f"{_num(alert.edge_sum)}/{2 * alert.edge_count}" if alert.edge_count else _num(alert.score)
    rows.append(("Total", alert.name, "", total))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    head = f"alert {alert.qg} host={alert.host} trigger_ts={alert.trigger_ts} score={alert.score:.4f}"
    lines = [head]
    for i, r in enumerate(rows):
        lines.append(" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if i == 0 or i == len(alert.nodes) or i == len(rows) - 2:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_json(alert: Alert) -> str:
    return json.dumps(alert.to_doc(), ensure_ascii=False, separators=(",", ":")) + "\n"


def render_alert(alert: Alert, fmt: str = "table") -> str:
    """Render as ``table`` (human text) or ``json`` (one NDJSON line)."""
    if fmt in ("table", "table-text"):
        return render_table(alert)
    if fmt in ("json", "json-lines"):
        return render_json(alert)
    raise ValueError(f"unknown alert format {fmt!r}")
