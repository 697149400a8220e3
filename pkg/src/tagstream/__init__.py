"""Streaming attack-pattern alignment over provenance event streams."""

from __future__ import annotations

from .event_model import Entity, Event, EventParser, ParseError, entity_key, parse_event_line
from .query_graph import QueryGraph, load_query_graph, load_query_graphs, match_node, search
from .scoring import Alert, edge_score, graph_score, render_alert, should_alert
from .tag_engine import AlignmentStatus, EngineConfig, Tag, TagEngine

__all__ = [
    "Alert",
    "AlignmentStatus",
    "EngineConfig",
    "Entity",
    "Event",
    "EventParser",
    "ParseError",
    "QueryGraph",
    "Tag",
    "TagEngine",
    "edge_score",
    "entity_key",
    "graph_score",
    "load_query_graph",
    "load_query_graphs",
    "match_node",
    "parse_event_line",
    "render_alert",
    "search",
    "should_alert",
]

__version__ = "0.1.0"
