"""Entities, normalized events and the NDJSON event format.

An event is the 4-tuple (subject, verb, object, timestamp) plus a per-partition
sequence number. Entities are interned by their canonical key so that the same
logical entity is one object for the lifetime of a parser.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Any, Mapping, NamedTuple

try:
    import orjson

    _loads = orjson.loads
except ImportError:  # pragma: no cover - orjson is a declared dependency
    _loads = json.loads

KINDS = frozenset({"process", "file", "registry", "socket", "pipe", "other"})
VERBS = frozenset(
    {
        "fork",
        "exec",
        "read",
        "write",
        "create",
        "delete",
        "rename",
        "connect",
        "send",
        "recv",
        "modify_registry",
        "load",
    }
)
DEFAULT_HOST = "h0"
OPTIONAL_ATTRS = ("path", "cmdline", "image", "addr")

# (host, kind, name, path-or-addr); a plain tuple keeps lookups cheap on the hot path
EntityId = tuple


class ParseError(ValueError):
    """A line that cannot become an Event.

    ``reason`` is one of ``malformed_document``, ``missing_field`` or
    ``bad_timestamp``; ``detail`` names the offending field when there is one.
    """

    def __init__(self, reason: str, detail: str = "", line_no: int | None = None):
        self.reason = reason
        self.detail = detail
        self.line_no = line_no
        msg = reason if not detail else f"{reason}: {detail}"
        if line_no is not None:
            msg = f"line {line_no}: {msg}"
        super().__init__(msg)


class UnknownKindWarning(UserWarning):
    """An entity kind outside the closed set was coerced to ``other``."""


class MissingName(ValueError):
    pass


def entity_key(host: str, kind: str, attrs: Mapping[str, str]) -> EntityId:
    """Canonical identity of an entity.

    Files are disambiguated by ``path`` and sockets by ``addr``; whichever is
    present is folded in (``path`` wins when both are). Timestamps never take
    part, entities persist across events.
    """
    name = attrs.get("name")
    if name is None:
        raise MissingName(f"entity on host {host!r} has no name")
    extra = attrs.get("path")
    if extra is None:
        extra = attrs.get("addr", "")
    return (host, kind, name, extra)


@dataclass(frozen=True, eq=False)
class Entity:
    id: EntityId
    kind: str
    attrs: Mapping[str, str]
    host: str = DEFAULT_HOST

    @property
    def name(self) -> str:
        return self.attrs["name"]

    def display(self) -> str:
        """Most specific human label: path, then addr, then name."""
        a = self.attrs
        return a.get("path") or a.get("addr") or a["name"]

    def to_doc(self) -> dict[str, str]:
        doc = {"kind": self.kind, "name": self.attrs["name"]}
        for k in OPTIONAL_ATTRS:
            if k in self.attrs:
                doc[k] = self.attrs[k]
        return doc

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Entity):
            return NotImplemented
        return self.id == other.id and dict(self.attrs) == dict(other.attrs)

    def __hash__(self) -> int:
        return hash(self.id)

    def __repr__(self) -> str:
        return f"Entity({self.kind}:{self.display()}@{self.host})"


def make_entity(host: str, kind: str, attrs: Mapping[str, str]) -> Entity:
    if kind not in KINDS:
        kind = "other"
    attrs = dict(attrs)
    return Entity(entity_key(host, kind, attrs), kind, attrs, host)


class Event(NamedTuple):
    seq: int
    ts: int
    subject: Entity
    op: str
    object: Entity

    @property
    def host(self) -> str:
        return self.subject.host

    def to_doc(self) -> dict[str, Any]:
        return {
            "ts": self.ts,
            "host": self.subject.host,
            "subj": self.subject.to_doc(),
            "op": self.op,
            "obj": self.object.to_doc(),
        }

    def short(self) -> str:
        return f"({self.subject.display()} -{self.op}-> {self.object.display()})"


def serialize_event(ev: Event) -> str:
    """One NDJSON line (without the trailing newline)."""
    return json.dumps(ev.to_doc(), separators=(",", ":"), ensure_ascii=False)


@dataclass
class EventParser:
    """Stateful parser that interns entities across lines.

    ``parse_event_line`` is the pure single-line form; this class exists for
    the streaming path where re-creating the same Entity on every line would
    dominate the cost.
    """

    intern: bool = True
    coerced_kinds: int = 0
    _entities: dict = field(default_factory=dict, repr=False)

    def parse(self, line: str | bytes, seq: int = 0) -> Event | None:
        """Parse one line; returns None for comments and blank lines."""
        try:
            doc = _loads(line)
        except (ValueError, TypeError) as exc:
            if _is_skippable(line):
                return None
            raise ParseError("malformed_document", str(exc)) from None
        if not isinstance(doc, dict):
            raise ParseError("malformed_document", "record is not an object")
        return self.from_doc(doc, seq)

    def from_doc(self, doc: Mapping[str, Any], seq: int = 0) -> Event:
        try:
            ts = doc["ts"]
            subj = doc["subj"]
            op = doc["op"]
            obj = doc["obj"]
        except KeyError as exc:
            raise ParseError("missing_field", exc.args[0]) from None
        if type(ts) is not int or ts < 0:
            raise ParseError("bad_timestamp", repr(ts))
        if op not in VERBS:
            raise ParseError("malformed_document", f"unknown op {op!r}")
        host = doc.get("host", DEFAULT_HOST)
        if not isinstance(host, str):
            raise ParseError("malformed_document", "host must be a string")
        return Event(seq, ts, self._entity(host, subj, "subj"), op, self._entity(host, obj, "obj"))

    def _entity(self, host: str, d: Any, where: str) -> Entity:
        if not isinstance(d, dict):
            raise ParseError("malformed_document", f"{where} must be an object")
        kind = d.get("kind")
        name = d.get("name")
        if kind is None:
            raise ParseError("missing_field", f"{where}.kind")
        if name is None:
            raise ParseError("missing_field", f"{where}.name")
        extra = d.get("path")
        if extra is None:
            extra = d.get("addr", "")
        key = (host, kind, name, extra)
        ent = self._entities.get(key)
        if ent is not None:
            return ent
        if not isinstance(name, str) or not isinstance(kind, str) or not isinstance(extra, str):
            raise ParseError("malformed_document", f"{where} attributes must be strings")
        attrs = {"name": name}
        for k in OPTIONAL_ATTRS:
            v = d.get(k)
            if v is not None:
                if not isinstance(v, str):
                    raise ParseError("malformed_document", f"{where}.{k} must be a string")
                attrs[k] = v
        if kind not in KINDS:
            self.coerced_kinds += 1
            warnings.warn(f"unknown kind {kind!r} coerced to 'other'", UnknownKindWarning, stacklevel=3)
            ent = Entity((host, "other", name, extra), "other", attrs, host)
        else:
            ent = Entity(key, kind, attrs, host)
        if self.intern:
            self._entities[key] = ent
        return ent


def _is_skippable(line: str | bytes) -> bool:
    s = line.strip()
    if isinstance(s, bytes):
        return not s or s.startswith(b"#")
    return not s or s.startswith("#")


def parse_event_line(line: str | bytes, seq: int = 0) -> Event:
    """Parse a single NDJSON record into an Event.

    Raises ParseError for anything that is not a valid record, including
    blank and comment lines (callers streaming a file skip those first).
    """
    if _is_skippable(line):
        raise ParseError("malformed_document", "blank or comment line")
    ev = EventParser(intern=False).parse(line, seq)
    assert ev is not None
    return ev
