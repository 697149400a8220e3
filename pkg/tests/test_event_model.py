from __future__ import annotations

import json
import warnings

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tagstream.event_model import (
    KINDS,
    VERBS,
    EventParser,
    MissingName,
    ParseError,
    UnknownKindWarning,
    entity_key,
    make_entity,
    parse_event_line,
    serialize_event,
)

LINE = '{"ts":1,"subj":{"kind":"process","name":"firefox"},"op":"exec","obj":{"kind":"process","name":"reg.exe"}}'


def test_parse_maps_fields():
    ev = parse_event_line(LINE)
    assert ev.ts == 1
    assert ev.op == "exec"
    assert ev.subject.name == "firefox" and ev.subject.kind == "process"
    assert ev.object.name == "reg.exe"
    assert ev.host == "h0"


def test_parse_twice_identical():
    a, b = parse_event_line(LINE), parse_event_line(LINE)
    assert a == b
    assert a.subject.id == b.subject.id and a.object.id == b.object.id


def test_missing_op():
    doc = json.loads(LINE)
    del doc["op"]
    with pytest.raises(ParseError) as exc:
        parse_event_line(json.dumps(doc))
    assert exc.value.reason == "missing_field"
    assert exc.value.detail == "op"


@pytest.mark.parametrize(
    "line,reason",
    [
        ("{not json", "malformed_document"),
        ("[1, 2]", "malformed_document"),
        ('{"ts":-5,"subj":{"kind":"process","name":"a"},"op":"exec","obj":{"kind":"process","name":"b"}}', "bad_timestamp"),
        ('{"ts":"x","subj":{"kind":"process","name":"a"},"op":"exec","obj":{"kind":"process","name":"b"}}', "bad_timestamp"),
        ('{"ts":1.5,"subj":{"kind":"process","name":"a"},"op":"exec","obj":{"kind":"process","name":"b"}}', "bad_timestamp"),
        ('{"ts":1,"subj":{"kind":"process","name":"a"},"op":"teleport","obj":{"kind":"process","name":"b"}}', "malformed_document"),
        ('{"ts":1,"subj":{"kind":"process"},"op":"exec","obj":{"kind":"process","name":"b"}}', "missing_field"),
        ('{"ts":1,"subj":"bash","op":"exec","obj":{"kind":"process","name":"b"}}', "malformed_document"),
        ("", "malformed_document"),
        ("# a comment", "malformed_document"),
    ],
)
def test_parse_errors(line, reason):
    with pytest.raises(ParseError) as exc:
        parse_event_line(line)
    assert exc.value.reason == reason


def test_unknown_kind_coerced_with_warning():
    line = LINE.replace('"kind":"process","name":"reg.exe"', '"kind":"service","name":"reg.exe"')
    with pytest.warns(UnknownKindWarning):
        ev = parse_event_line(line)
    assert ev.object.kind == "other"


def test_streaming_parser_skips_comments_and_blanks():
    p = EventParser()
    assert p.parse("# header") is None
    assert p.parse("   ") is None
    assert p.parse(LINE.encode()) is not None


def test_interned_entities_are_shared():
    p = EventParser()
    a = p.parse(LINE, 0)
    b = p.parse(LINE, 1)
    assert a.subject is b.subject
    assert b.seq == 1


def test_entity_key_examples():
    assert entity_key("h1", "process", {"name": "bash"}) == entity_key("h1", "process", {"name": "bash"})
    assert entity_key("h1", "file", {"name": "a", "path": "/x/a"}) != entity_key("h1", "file", {"name": "a", "path": "/y/a"})
    assert entity_key("h1", "process", {"name": "bash"}) != entity_key("h2", "process", {"name": "bash"})


def test_entity_key_needs_name():
    with pytest.raises(MissingName):
        entity_key("h1", "process", {"path": "/bin/bash"})


def test_entity_key_ignores_cmdline():
    a = entity_key("h", "process", {"name": "python3", "cmdline": "python3 a.py"})
    b = entity_key("h", "process", {"name": "python3", "cmdline": "python3 b.py"})
    assert a == b


def test_socket_keyed_by_addr():
    a = entity_key("h", "socket", {"name": "s", "addr": "10.0.0.1:80"})
    b = entity_key("h", "socket", {"name": "s", "addr": "10.0.0.2:80"})
    assert a != b


# -- properties ------------------------------------------------------------------

text = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=12)
attr_maps = st.fixed_dictionaries(
    {"name": text},
    optional={"path": text, "cmdline": text, "addr": text},
)


@given(st.sampled_from(["h0", "h1", "web-01"]), st.sampled_from(sorted(KINDS)), attr_maps)
def test_entity_key_is_pure(host, kind, attrs):
    assert entity_key(host, kind, attrs) == entity_key(host, kind, dict(attrs))


@given(attr_maps, attr_maps, st.sampled_from(sorted(KINDS)))
def test_entity_key_collision_free(a, b, kind):
    quad = lambda m: (m["name"], m.get("path", m.get("addr", "")))  # noqa: E731
    if quad(a) != quad(b):
        assert entity_key("h", kind, a) != entity_key("h", kind, b)


entities = st.builds(
    lambda host, kind, attrs: make_entity(host, kind, attrs),
    st.just("hx"),
    st.sampled_from(sorted(KINDS)),
    attr_maps,
)


@given(entities, st.sampled_from(sorted(VERBS)), entities, st.integers(0, 2**53))
def test_serialize_parse_round_trip(subj, op, obj, ts):
    from tagstream.event_model import Event

    ev = Event(0, ts, subj, op, obj)
    back = parse_event_line(serialize_event(ev))
    assert back == ev


@given(st.text(max_size=200))
def test_parsing_is_total(line):
    # every line yields an Event or a ParseError, nothing else escapes
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UnknownKindWarning)
        try:
            ev = parse_event_line(line)
        except ParseError:
            return
    assert ev.op in VERBS
