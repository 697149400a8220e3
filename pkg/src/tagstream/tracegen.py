"""Synthetic labeled traces: benign background, attack templates, evasions.

In-memory traces are plain lists of Event. Large benign traces are written
straight to NDJSON from numpy draws over pre-serialized entity fragments so
that tens of millions of lines stay cheap to produce.
"""

from __future__ import annotations

import json
import math
import random
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from .event_model import DEFAULT_HOST, Entity, Event, EventParser, make_entity, serialize_event
from .query_graph import QueryGraph, SeedIndex, load_query_graphs
from .scoring import edge_score

BASE_TS = 1_700_000_000_000


class PositionOutOfRange(IndexError):
    pass


class NoAlternatives(ValueError):
    pass


# -- entity specs and templates -------------------------------------------------


@dataclass(frozen=True)
class EntitySpec:
    kind: str
    name: str
    path: str | None = None
    addr: str | None = None

    def attrs(self) -> dict[str, str]:
        a = {"name": self.name}
        if self.path is not None:
            a["path"] = self.path
        if self.addr is not None:
            a["addr"] = self.addr
        return a

    def build(self, host: str) -> Entity:
        return make_entity(host, self.kind, self.attrs())


@dataclass(frozen=True)
class Step:
    subj: EntitySpec
    op: str
    obj: EntitySpec


@dataclass(frozen=True)
class AttackTemplate:
    """Concrete event script for one query graph.

    ``edge_paths`` maps each query edge to the script positions forming its
    aligned path (the last position is the aligning event). ``nodes`` maps
    each script entity to the query node it is meant to align with.
    """

    qg: str
    script: tuple[Step, ...]
    edge_paths: dict[str, tuple[int, ...]]
    nodes: dict[EntitySpec, str]

    @property
    def edge_map(self) -> dict[int, str]:
        """Aligning script position -> query edge id."""
        return {pos[-1]: eid for eid, pos in self.edge_paths.items()}

    def path_lengths(self) -> dict[str, int]:
        return {eid: len(pos) for eid, pos in self.edge_paths.items()}

    def events(self, host: str = DEFAULT_HOST, ts: int = 0) -> list[Event]:
        cache: dict[EntitySpec, Entity] = {}

        def ent(s: EntitySpec) -> Entity:
            e = cache.get(s)
            if e is None:
                e = cache[s] = s.build(host)
            return e

        return [Event(i, ts, ent(st.subj), st.op, ent(st.obj)) for i, st in enumerate(self.script)]


def _proc(name: str, path: str | None = None) -> EntitySpec:
    return EntitySpec("process", name, path)


def _file(name: str, path: str) -> EntitySpec:
    return EntitySpec("file", name, path)


def _sock(addr: str) -> EntitySpec:
    return EntitySpec("socket", addr, addr=addr)


def _template_qg1() -> AttackTemplate:
    cron = _proc("cron")
    script = _proc("backup.sh", "/usr/local/bin/backup.sh")
    c2 = _sock("203.0.113.7:4444")
    keys = _file("authorized_keys", "/root/.ssh/authorized_keys")
    steps = (Step(cron, "fork", script), Step(script, "connect", c2), Step(script, "write", keys))
    return AttackTemplate("QG1", steps, {"e1": (0,), "e2": (1,), "e3": (2,)}, {cron: "n1", script: "n2", c2: "n3", keys: "n4"})


def _template_qg2() -> AttackTemplate:
    browser = _proc("firefox")
    dropper = _file("x.sh", "C:\\temp\\x.sh")
    dll = _file("evil.dll", "C:\\temp\\evil.dll")
    reg = _proc("reg.exe")
    run = EntitySpec("registry", "run", "hkcu\\software\\microsoft\\windows\\currentVersion\\run")
    steps = (
        Step(browser, "write", dropper),
        Step(dropper, "create", dll),
        Step(browser, "exec", reg),
        Step(reg, "modify_registry", run),
    )
    return AttackTemplate("QG2", steps, {"e1": (0, 1), "e2": (2,), "e3": (3,)}, {browser: "n1", dll: "n2", reg: "n3", run: "n4"})


def _template_qg4() -> AttackTemplate:
    shell = _proc("cmd.exe")
    arch = _proc("tar.exe")
    doc = _file("report.docx", "C:\\Users\\alice\\Documents\\report.docx")
    out = _file("backup.zip", "C:\\Users\\alice\\Documents\\backup.zip")
    vss = _proc("vssadmin.exe")
    steps = (
        Step(shell, "exec", arch),
        Step(arch, "read", doc),
        Step(arch, "write", out),
        Step(shell, "exec", vss),
    )
    return AttackTemplate(
        "QG4", steps, {"e1": (0,), "e2": (1,), "e3": (2,), "e4": (3,)}, {shell: "n1", arch: "n2", doc: "n3", out: "n4", vss: "n5"}
    )


def _template_qg5() -> AttackTemplate:
    browser = _proc("chrome")
    src = _sock("198.51.100.23:443")
    payload = _file("payload.exe", "C:\\Users\\alice\\Downloads\\payload.exe")
    proc = _proc("updater.exe")
    c2 = _sock("198.51.100.99:8443")
    drop = _file("cache.bin", "C:\\ProgramData\\cache.bin")
    recon = _proc("whoami.exe")
    steps = (
        Step(browser, "connect", src),
        Step(browser, "write", payload),
        Step(payload, "exec", proc),
        Step(proc, "connect", c2),
        Step(proc, "write", drop),
        Step(proc, "exec", recon),
    )
    return AttackTemplate(
        "QG5",
        steps,
        {f"e{i + 1}": (i,) for i in range(6)},
        {browser: "n1", src: "n2", payload: "n3", proc: "n4", c2: "n5", drop: "n6", recon: "n7"},
    )


TEMPLATES: dict[str, AttackTemplate] = {t.qg: t for t in (_template_qg1(), _template_qg2(), _template_qg4(), _template_qg5())}


def template(qg: str) -> AttackTemplate:
    return TEMPLATES[qg]


def expected_score(path_lengths: dict[str, int], g: QueryGraph) -> float:
    return math.fsum(edge_score(n, g.s_sink) for n in path_lengths.values()) / (2 * g.edge_count)


# -- ground truth ---------------------------------------------------------------


@dataclass
class AttackRecord:
    qg: str
    host: str
    start_index: int
    indices: list[int]
    edges: dict[str, int]  # edge id -> expected path length
    expected_score: float
    # edge id -> trace indices of its path (last one aligns)
    edge_paths: dict[str, list[int]] = field(default_factory=dict)

    def shift(self, at: int, by: int) -> None:
        def mv(i: int) -> int:
            return i + by if i >= at else i

        self.start_index = mv(self.start_index)
        self.indices = [mv(i) for i in self.indices]
        self.edge_paths = {e: [mv(i) for i in p] for e, p in self.edge_paths.items()}

    def to_doc(self) -> dict:
        return {
            "qg": self.qg,
            "host": self.host,
            "start_index": self.start_index,
            "expected_score": self.expected_score,
            "edges": dict(self.edges),
        }


@dataclass
class GroundTruth:
    attacks: list[AttackRecord] = field(default_factory=list)
    near_misses: list[AttackRecord] = field(default_factory=list)

    def records(self) -> list[AttackRecord]:
        return self.attacks + self.near_misses

    def shift(self, at: int, by: int) -> None:
        for r in self.records():
            r.shift(at, by)

    def to_doc(self) -> dict:
        return {"attacks": [a.to_doc() for a in self.attacks], "near_misses": [a.to_doc() for a in self.near_misses]}

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_doc(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> GroundTruth:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))

        def rec(d: dict) -> AttackRecord:
            return AttackRecord(d["qg"], d.get("host", DEFAULT_HOST), d["start_index"], [], d["edges"], d["expected_score"])

        return cls([rec(d) for d in doc.get("attacks", [])], [rec(d) for d in doc.get("near_misses", [])])


def _graphs() -> dict[str, QueryGraph]:
    global _GRAPHS
    if _GRAPHS is None:
        _GRAPHS = {g.id: g for g in load_query_graphs()}
    return _GRAPHS


_GRAPHS: dict[str, QueryGraph] | None = None


def _reseq(trace: list[Event]) -> list[Event]:
    return [ev if ev.seq == i else ev._replace(seq=i) for i, ev in enumerate(trace)]


# -- injection and mutation -------------------------------------------------------


def inject_attack(
    trace: Sequence[Event],
    tmpl: AttackTemplate,
    at: int,
    rng_seed: int = 0,
    host: str | None = None,
    truth: GroundTruth | None = None,
    edges: Iterable[str] | None = None,
    near_miss: bool = False,
) -> tuple[list[Event], GroundTruth]:
    """Splice the template script contiguously at ``at``.

    ``edges`` restricts the script to the events of the listed edges (used for
    partial, near-miss injections). Existing ground-truth indices are shifted.
    """
    if not 0 <= at <= len(trace):
        raise PositionOutOfRange(f"position {at} outside [0, {len(trace)}]")
    if host is None:
        host = trace[at].host if at < len(trace) else (trace[-1].host if trace else DEFAULT_HOST)
    if at > 0:
        ts = trace[at - 1].ts
    elif trace:
        ts = trace[0].ts
    else:
        ts = 0
    keep = set(tmpl.edge_paths) if edges is None else set(edges)
    positions = sorted(p for e in keep for p in tmpl.edge_paths[e])
    script_events = tmpl.events(host, ts)
    block = [script_events[p] for p in positions]
    where = {p: at + i for i, p in enumerate(positions)}
    out = list(trace[:at]) + block + list(trace[at:])
    truth = truth if truth is not None else GroundTruth()
    truth.shift(at, len(block))
    lengths = {e: len(tmpl.edge_paths[e]) for e in tmpl.edge_paths if e in keep}
    rec = AttackRecord(
        qg=tmpl.qg,
        host=host,
        start_index=at,
        indices=list(range(at, at + len(block))),
        edges=lengths,
        expected_score=expected_score(lengths, _graphs()[tmpl.qg]),
        edge_paths={e: [where[p] for p in tmpl.edge_paths[e]] for e in lengths},
    )
    (truth.near_misses if near_miss else truth.attacks).append(rec)
    return _reseq(out), truth


def _copy_truth(gt: GroundTruth) -> GroundTruth:
    def cp(r: AttackRecord) -> AttackRecord:
        return replace(r, indices=list(r.indices), edges=dict(r.edges), edge_paths={e: list(p) for e, p in r.edge_paths.items()})

    return GroundTruth([cp(r) for r in gt.attacks], [cp(r) for r in gt.near_misses])


def _fresh_pipe(host: str, rng: random.Random, tag: str) -> Entity:
    # ``tag`` pins the chain position so names never repeat within a trace
    return make_entity(host, "pipe", {"name": f"pipe-{tag}-{rng.getrandbits(32):08x}"})


def mutate_in_chain(
    trace: Sequence[Event],
    gt: GroundTruth,
    k: int,
    rng_seed: int = 0,
    edges: Iterable[str] | None = None,
    attack: int | None = None,
) -> tuple[list[Event], GroundTruth]:
    """Replace each selected edge's aligned path by a (k+1)-hop gadget chain.

    The chain keeps the path's endpoints and final verb; the k intermediaries
    are fresh pipe entities that no query node can match. ``k=0`` is the
    identity. ``attack`` selects one record (default: all attacks).
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return list(trace), _copy_truth(gt)
    rng = random.Random(rng_seed)
    gt = _copy_truth(gt)
    out = list(trace)
    records = gt.attacks if attack is None else [gt.attacks[attack]]
    # collect (edge path indices) for every affected edge, then rewrite back to front
    jobs = []
    for rec in records:
        sel = rec.edge_paths.keys() if edges is None else [e for e in edges if e in rec.edge_paths]
        for eid in sel:
            jobs.append((rec, eid))
    jobs.sort(key=lambda j: j[0].edge_paths[j[1]][-1], reverse=True)
    for rec, eid in jobs:
        idx = rec.edge_paths[eid]
        first, last = out[idx[0]], out[idx[-1]]
        host = last.host
        where = f"{rec.qg.lower()}-{rec.host}-{rec.start_index}-{eid}"
        chain_nodes = [first.subject] + [_fresh_pipe(host, rng, f"{where}-{h}") for h in range(k)] + [last.object]
        chain = [
            Event(0, last.ts, chain_nodes[h], "write" if h < k else last.op, chain_nodes[h + 1]) for h in range(k + 1)
        ]
        # drop the old path events, then insert the chain where the aligning event was
        for i in sorted(idx, reverse=True):
            del out[i]
            gt.shift(i + 1, -1)
        pos = idx[-1] - (len(idx) - 1)
        out[pos:pos] = chain
        gt.shift(pos, len(chain))
        rec.edge_paths[eid] = list(range(pos, pos + len(chain)))
        rec.edges[eid] = len(chain)
    for rec in records:
        rec.expected_score = expected_score(rec.edges, _graphs()[rec.qg])
        rec.indices = sorted(i for p in rec.edge_paths.values() for i in p)
        rec.start_index = rec.indices[0]
    return _reseq(out), gt


_AROUND_EXT = ("dat", "log", "tmp")


def mutate_around(trace: Sequence[Event], gt: GroundTruth, k: int, rng_seed: int = 0) -> tuple[list[Event], GroundTruth]:
    """Add k events from attack entities to fresh neutral files.

    The new events never extend an aligned path: their objects are fresh and
    never act as subjects, so scores are unchanged. Returns the new trace and
    a shifted copy of ``gt``.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    gt = _copy_truth(gt)
    if k == 0 or not gt.attacks:
        return list(trace), gt
    rng = random.Random(rng_seed)
    out = list(trace)
    for n in range(k):
        rec = gt.attacks[rng.randrange(len(gt.attacks))]
        anchor = rng.choice(rec.indices)
        ent = rng.choice((out[anchor].subject, out[anchor].object))
        pos = rng.randint(anchor + 1, rec.indices[-1] + 1)
        ext = rng.choice(_AROUND_EXT)
        name = f"noise-{rng.getrandbits(32):08x}-{n}.{ext}"
        obj = make_entity(ent.host, "file", {"name": name, "path": f"/tmp/{name}"})
        ts = out[pos - 1].ts
        out.insert(pos, Event(0, ts, ent, rng.choice(("read", "write")), obj))
        gt.shift(pos, 1)
    return _reseq(out), gt


_ALT_GROUP = re.compile(r"\(([^()]*\|[^()]*)\)")
_PLAIN = re.compile(r"[A-Za-z0-9_-]+")


def _alternatives(pattern: str) -> list[list[str]]:
    groups = []
    for m in _ALT_GROUP.finditer(pattern):
        alts = m.group(1).split("|")
        if all(_PLAIN.fullmatch(a) for a in alts):
            groups.append(alts)
    return groups


def mutate_entities(tmpl: AttackTemplate, rng_seed: int = 0) -> AttackTemplate:
    """Swap concrete tool names for other alternatives the query graph admits."""
    rng = random.Random(rng_seed)
    g = _graphs()[tmpl.qg]
    renames: dict[EntitySpec, EntitySpec] = {}
    for spec, node in tmpl.nodes.items():
        pred = g.nodes[node].predicate
        pat = pred.patterns.get("name")
        if pat is None:
            continue
        options = []
        for alts in _alternatives(pat):
            for a in alts:
                idx = spec.name.lower().find(a.lower())
                if idx < 0:
                    continue
                for b in alts:
                    if b.lower() == a.lower():
                        continue
                    new_name = spec.name[:idx] + b + spec.name[idx + len(a) :]
                    new_path = spec.path.replace(spec.name, new_name) if spec.path else spec.path
                    cand = replace(spec, name=new_name, path=new_path)
                    if pred.matches(cand.build("probe")) and new_name != spec.name:
                        options.append(cand)
        if options:
            renames[spec] = options[rng.randrange(len(options))]
    if not renames:
        raise NoAlternatives(f"template {tmpl.qg} has no swappable names")

    def sub(s: EntitySpec) -> EntitySpec:
        return renames.get(s, s)

    script = tuple(Step(sub(st.subj), st.op, sub(st.obj)) for st in tmpl.script)
    nodes = {sub(s): n for s, n in tmpl.nodes.items()}
    return AttackTemplate(tmpl.qg, script, dict(tmpl.edge_paths), nodes)


def near_miss_edges(g: QueryGraph) -> list[str]:
    """A connected prefix of floor(E/2) edges grown from the seed in document order."""
    want = g.edge_count // 2
    reached = {s.node if s.node is not None else g.edges[s.edge].src for s in g.seeds}
    picked: list[str] = []
    while len(picked) < want:
        for e in g.edges.values():
            if e.id not in picked and e.src in reached:
                picked.append(e.id)
                reached.add(e.dst)
                break
        else:
            break
    return picked


# -- benign background --------------------------------------------------------------

BENIGN_PROCS = (
    "bash", "sshd", "systemd", "python3", "java", "node", "postgres", "redis-server",
    "dockerd", "rsyslogd", "journald", "cupsd", "gnome-shell", "Xorg", "svchost.exe",
    "explorer.exe", "notepad.exe", "lsass.exe", "services.exe", "winlogon.exe",
    "spoolsv.exe", "onedrive.exe", "teams.exe", "outlook.exe", "slack", "code", "vim",
    "less", "grep", "awk", "sed", "make", "gcc", "ld", "git", "rsync", "logrotate", "updatedb",
)  # fmt: skip
SEED_NOISE_PROCS = ("firefox", "chrome", "cmd.exe", "powershell.exe", "cron", "curl")
FILE_EXT = ("dat", "log", "cache", "db", "conf", "json")
FILE_DIRS = ("var/lib/app", "home/user/work", "srv/data", "opt/svc")

# op, object class (0 process, 1 file, 2 socket), weight
_OPS = (
    ("read", 1, 0.34),
    ("write", 1, 0.18),
    ("create", 1, 0.04),
    ("delete", 1, 0.02),
    ("rename", 1, 0.02),
    ("load", 1, 0.06),
    ("connect", 2, 0.08),
    ("send", 2, 0.09),
    ("recv", 2, 0.09),
    ("fork", 0, 0.04),
    ("exec", 0, 0.04),
)
FILES_PER_HOST = 2000
SOCKETS_PER_HOST = 200


def host_names(hosts: int) -> list[str]:
    return [f"h{i}" for i in range(hosts)]


def _frag(kind: str, name: str, path: str | None = None, addr: str | None = None) -> str:
    d = {"kind": kind, "name": name}
    if path is not None:
        d["path"] = path
    if addr is not None:
        d["addr"] = addr
    return json.dumps(d, separators=(",", ":"))


class BenignModel:
    """Per-host entity pools with pre-serialized JSON fragments."""

    def __init__(self, hosts: int, seed_noise: float = 0.0):
        if hosts < 1:
            raise ValueError("hosts must be >= 1")
        self.hosts = host_names(hosts)
        self.seed_noise = seed_noise
        self.procs = [_frag("process", p, f"/usr/bin/{p}") for p in BENIGN_PROCS]
        self.noise = [_frag("process", p) for p in SEED_NOISE_PROCS]
        self.files = []
        self.socks = []
        for h in range(hosts):
            self.files.append(
                [
                    _frag("file", f"obj{i}.{FILE_EXT[i % len(FILE_EXT)]}", f"/{FILE_DIRS[i % len(FILE_DIRS)]}/obj{i}.{FILE_EXT[i % len(FILE_EXT)]}")
                    for i in range(FILES_PER_HOST)
                ]
            )
            self.socks.append([_frag("socket", a, addr=a) for a in (f"10.{h % 250}.{i // 50}.{i % 50 + 1}:{443 + i % 7}" for i in range(SOCKETS_PER_HOST))])
        self.ops = [o[0] for o in _OPS]
        self.op_class = np.array([o[1] for o in _OPS])
        w = np.array([o[2] for o in _OPS])
        self.op_p = w / w.sum()

    def check_no_seed_hits(self, graphs: Iterable[QueryGraph]) -> None:
        idx = SeedIndex.build(graphs)
        parser = EventParser(intern=False)
        for frag in self.procs:
            ent = parser._entity("h0", json.loads(frag), "subj")
            if idx.node_hits(ent) or idx.edge_candidates(ent):
                raise AssertionError(f"benign process {frag} matches a seed")

    def chunks(self, n: int, rng_seed: int, spacing_ms: float = 10.0, start_ts: int = BASE_TS, chunk: int = 200_000) -> Iterator[list[str]]:
        """Yield lists of NDJSON lines (with newline) totalling ``n`` events."""
        rng = np.random.default_rng(rng_seed)
        ts = start_ts
        n_procs = len(self.procs)
        nh = len(self.hosts)
        hosts_json = [json.dumps(h) for h in self.hosts]
        ops = self.ops
        done = 0
        while done < n:
            m = min(chunk, n - done)
            gaps = rng.integers(0, max(1, int(2 * spacing_ms)) + 1, size=m)
            tss = ts + np.cumsum(gaps)
            ts = int(tss[-1])
            hs = rng.integers(0, nh, size=m)
            op = rng.choice(len(ops), size=m, p=self.op_p)
            cls = self.op_class[op]
            # zipf-like skew over pools
            subj = np.minimum((rng.pareto(1.2, size=m) * 3).astype(np.int64), n_procs - 1)
            pobj = rng.integers(0, n_procs, size=m)
            fobj = np.minimum((rng.pareto(0.9, size=m) * 40).astype(np.int64), FILES_PER_HOST - 1)
            sobj = rng.integers(0, SOCKETS_PER_HOST, size=m)
            noisy = rng.random(size=m) < self.seed_noise if self.seed_noise > 0 else None
            nsubj = rng.integers(0, len(self.noise), size=m)
            lines = []
            procs, noise, files, socks = self.procs, self.noise, self.files, self.socks
            for i in range(m):
                h = hs[i]
                c = cls[i]
                if c == 1:
                    o = files[h][fobj[i]]
                elif c == 2:
                    o = socks[h][sobj[i]]
                else:
                    o = procs[pobj[i]]
                s = noise[nsubj[i]] if noisy is not None and noisy[i] else procs[subj[i]]
                lines.append(f'{{"ts":{tss[i]},"host":{hosts_json[h]},"subj":{s},"op":"{ops[op[i]]}","obj":{o}}}\n')
            done += m
            yield lines


def gen_benign(n: int, hosts: int = 1, rng_seed: int = 0, seed_noise: float = 0.0, spacing_ms: float = 10.0) -> list[Event]:
    model = BenignModel(hosts, seed_noise)
    parser = EventParser()
    out = []
    for lines in model.chunks(n, rng_seed, spacing_ms):
        for line in lines:
            out.append(parser.parse(line, len(out)))
    return out


def write_benign(out: IO[str], n: int, hosts: int = 1, rng_seed: int = 0, seed_noise: float = 0.0, spacing_ms: float = 10.0) -> int:
    model = BenignModel(hosts, seed_noise)
    written = 0
    for lines in model.chunks(n, rng_seed, spacing_ms):
        out.writelines(lines)
        written += len(lines)
    return written


# -- assembling labeled traces --------------------------------------------------------


@dataclass
class InjectionPlan:
    qg: str
    host: str
    in_chain: int = 0
    around: int = 0
    near_miss: bool = False
    mutate_names: bool = False


def attack_block(plan: InjectionPlan, rng_seed: int) -> tuple[list[Event], AttackRecord]:
    """Template events for one plan, mutated in isolation, with their record."""
    tmpl = template(plan.qg)
    if plan.mutate_names:
        tmpl = mutate_entities(tmpl, rng_seed)
    edges = near_miss_edges(_graphs()[plan.qg]) if plan.near_miss else None
    trace, gt = inject_attack([], tmpl, 0, rng_seed, host=plan.host, edges=edges)
    if plan.in_chain:
        trace, gt = mutate_in_chain(trace, gt, plan.in_chain, rng_seed)
    if plan.around:
        trace, gt = mutate_around(trace, gt, plan.around, rng_seed + 1)
    rec = gt.attacks[0]
    return trace, rec


def write_labeled_trace(
    out: IO[str],
    n_benign: int,
    hosts: int,
    plans: Sequence[InjectionPlan],
    rng_seed: int = 0,
    seed_noise: float = 0.0,
    spacing_ms: float = 10.0,
) -> GroundTruth:
    """Benign background with attack blocks spliced at random positions."""
    rng = random.Random(rng_seed)
    blocks = [attack_block(p, rng_seed * 1009 + i) for i, p in enumerate(plans)]
    positions = sorted(rng.randint(0, n_benign) for _ in blocks)
    order = list(range(len(blocks)))
    rng.shuffle(order)
    truth = GroundTruth()
    model = BenignModel(hosts, seed_noise)
    written = 0
    last_ts = BASE_TS
    pending = [(positions[i], order[i]) for i in range(len(blocks))]
    pi = 0

    def flush(pos: int) -> None:
        nonlocal pi, written
        while pi < len(pending) and pending[pi][0] <= pos:
            events, rec = blocks[pending[pi][1]]
            rec = replace(rec)
            rec.shift(0, written)
            for ev in events:
                out.write(serialize_event(ev._replace(ts=last_ts)) + "\n")
            written += len(events)
            (truth.near_misses if plans[pending[pi][1]].near_miss else truth.attacks).append(rec)
            pi += 1

    benign_seen = 0
    for lines in model.chunks(n_benign, rng_seed, spacing_ms):
        for line in lines:
            flush(benign_seen)
            out.write(line)
            written += 1
            benign_seen += 1
            last_ts = int(line[6 : line.index(",")])
    flush(n_benign)
    return truth


def threshold_corpus_plans(n_attacks: int = 20, n_near: int = 20, rng_seed: int = 0) -> list[InjectionPlan]:
    """Full attacks with random in-chain padding plus half-edge near misses, one host each."""
    rng = random.Random(rng_seed)
    qgs = sorted(TEMPLATES)
    plans = []
    for i in range(n_attacks):
        plans.append(InjectionPlan(qgs[i % len(qgs)], f"atk{i}", in_chain=rng.randint(0, 4)))
    for i in range(n_near):
        plans.append(InjectionPlan(qgs[i % len(qgs)], f"near{i}", in_chain=rng.randint(0, 2), near_miss=True))
    return plans


# -- small random traces for oracle comparison ------------------------------------------

_NOISE_SPECS = (
    _proc("bash"),
    _proc("python3"),
    _proc("svchost.exe"),
    _proc("7z.exe"),
    _proc("reg"),
    _proc("id"),
    _file("a.exe", "/tmp/a.exe"),
    _file("b.sh", "/tmp/b.sh"),
    _file("notes.txt", "/home/u/notes.txt"),
    _file("c.zip", "/tmp/c.zip"),
    _file("data.dat", "/var/data.dat"),
    _file("shadow", "/etc/shadow"),
    _sock("10.0.0.5:80"),
    _sock("10.0.0.9:443"),
    EntitySpec("registry", "runonce", "hklm\\software\\microsoft\\windows\\currentversion\\runonce"),
    _proc("chrome"),
    _proc("powershell.exe"),
    _proc("crond"),
)
_RANDOM_OPS = ("read", "write", "create", "exec", "fork", "connect", "send", "recv", "modify_registry", "load")


def random_trace(rng_seed: int, max_events: int = 200, attacks: int | None = None) -> tuple[list[Event], list[str]]:
    """Random small trace mixing planted templates with adversarial noise.

    Noise events reuse attack entities and predicate-matching decoys, so
    alternative paths, conflicting alignments and extra seed instances occur.
    Timestamps strictly increase with the index.
    """
    rng = random.Random(rng_seed)
    host = DEFAULT_HOST
    n_att = attacks if attacks is not None else rng.randint(1, 3)
    chosen = [rng.choice(sorted(TEMPLATES)) for _ in range(n_att)]
    blocks = []
    universe: list[Entity] = [s.build(host) for s in _NOISE_SPECS]
    for qg in chosen:
        tmpl = template(qg)
        if rng.random() < 0.3:
            try:
                tmpl = mutate_entities(tmpl, rng.randrange(1 << 30))
            except NoAlternatives:
                pass
        evs = tmpl.events(host)
        if rng.random() < 0.3:
            keep = [p for e in near_miss_edges(_graphs()[qg]) for p in tmpl.edge_paths[e]]
            evs = [evs[p] for p in sorted(keep)]
        blocks.append(evs)
        universe.extend({e.subject for e in evs} | {e.object for e in evs})
    universe = sorted(set(universe), key=lambda e: e.id)
    budget = max_events - sum(len(b) for b in blocks)
    n_noise = rng.randint(0, max(0, min(budget, max_events // 2)))
    noise = []
    for _ in range(n_noise):
        s = rng.choice(universe)
        o = rng.choice(universe)
        noise.append(Event(0, 0, s, rng.choice(_RANDOM_OPS), o))
    # interleave: each block keeps its internal order, noise lands anywhere
    slots: list[list[Event]] = [list(b) for b in blocks] + [[ev] for ev in noise]
    trace: list[Event] = []
    pointers = [0] * len(slots)
    live = [i for i in range(len(slots)) if slots[i]]
    while live:
        i = rng.choice(live)
        trace.append(slots[i][pointers[i]])
        pointers[i] += 1
        if pointers[i] >= len(slots[i]):
            live.remove(i)
    trace = [ev._replace(seq=i, ts=BASE_TS + 10 * i) for i, ev in enumerate(trace)]
    return trace, chosen
