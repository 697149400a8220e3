from __future__ import annotations

import contextlib
import json
from pathlib import Path

import pytest

from tagstream.event_model import EventParser
from tagstream.query_graph import load_query_graphs

# the four-event boot-autostart walk-through: dropper write, dll create, reg exec, run-key write
WORKED_DOCS = [
    {"ts": 1000, "subj": {"kind": "process", "name": "firefox"}, "op": "write",
     "obj": {"kind": "file", "name": "x.sh", "path": "C:\\temp\\x.sh"}},
    {"ts": 2000, "subj": {"kind": "file", "name": "x.sh", "path": "C:\\temp\\x.sh"}, "op": "create",
     "obj": {"kind": "file", "name": "evil.dll", "path": "C:\\temp\\evil.dll"}},
    {"ts": 3000, "subj": {"kind": "process", "name": "firefox"}, "op": "exec",
     "obj": {"kind": "process", "name": "reg.exe"}},
    {"ts": 4000, "subj": {"kind": "process", "name": "reg.exe"}, "op": "modify_registry",
     "obj": {"kind": "registry", "name": "k", "path": "hkcu\\software\\microsoft\\windows\\currentVersion\\run\\k"}},
]  # fmt: skip
WORKED_LINES = [json.dumps(d) for d in WORKED_DOCS]


@pytest.fixture(scope="session")
def graphs():
    return {g.id: g for g in load_query_graphs()}


@pytest.fixture(scope="session")
def qg2(graphs):
    return graphs["QG2"]


@pytest.fixture
def worked_events():
    parser = EventParser()
    return [parser.parse(line, i) for i, line in enumerate(WORKED_LINES)]


@pytest.fixture
def worked_file(tmp_path) -> Path:
    p = tmp_path / "worked.ndjson"
    p.write_text("\n".join(WORKED_LINES) + "\n", encoding="utf-8")
    return p


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE_RESULTS: list[tuple[int, str, str, str]] = []


class Criterion:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.detail = ""
        self.status = "FAIL"

    def note(self, text: str) -> None:
        self.detail = text


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record one acceptance criterion as PASS/FAIL/SKIP for the summary."""
    c = Criterion(number, title)
    try:
        yield c
        c.status = "PASS"
    except pytest.skip.Exception:
        c.status = "SKIP"
        raise
    finally:
        ACCEPTANCE_RESULTS.append((c.number, c.title, c.status, c.detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, detail in sorted(ACCEPTANCE_RESULTS):
        line = f"[{status}] criterion {number}: {title}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
