"""Source -> parse -> graph construction -> alignment, partitioned by host.

With one partition everything runs in-process as a single fused loop. With
more, the main process is the source: it routes raw lines by host to worker
processes over bounded queues, and each worker parses and aligns its share.
Processes rather than threads, because the alignment stage is pure Python.
"""

from __future__ import annotations

import json
import logging
import multiprocessing as mp
import os
import queue
import socket
import sys
import threading
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, BinaryIO, Callable, Iterable, Iterator

from .event_model import DEFAULT_HOST, Event, EventParser, ParseError
from .query_graph import LoadError, QueryGraph, load_query_graphs
from .scoring import Alert, alert_from_doc, render_alert
from .tag_engine import DEFAULT_CAP, DEFAULT_DECAY_MS, DEFAULT_MAX_ROUNDS, EngineConfig, TagEngine

log = logging.getLogger(__name__)

CONFIG_ENV = "TAGSTREAM_CONFIG"
DEFAULT_WINDOW = 10_000
_BATCH = 512


class ConfigError(ValueError):
    pass


class InputUnavailable(OSError):
    pass


class QueryGraphLoadError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    input: str = "-"
    query_graphs: list[str] | None = None  # files/dirs; None = shipped samples
    threshold: float | None = None
    max_rounds: int | None = DEFAULT_MAX_ROUNDS
    decay_ms: int | None = DEFAULT_DECAY_MS
    sweep_interval_ms: int = 60_000
    partitions: int | None = None  # None = host cardinality, capped by cpu count
    per_entity_qg_cap: int | None = DEFAULT_CAP
    metrics_out: str | None = None
    alerts_out: str | None = None
    alert_updates: bool = False
    window: int = DEFAULT_WINDOW
    audit: bool = False

    def validate(self) -> None:
        if self.partitions is not None and (not isinstance(self.partitions, int) or self.partitions < 1):
            raise ConfigError(f"partitions must be >= 1, got {self.partitions!r}")
        if not isinstance(self.sweep_interval_ms, int) or self.sweep_interval_ms <= 0:
            raise ConfigError(f"sweep_interval_ms must be > 0, got {self.sweep_interval_ms!r}")
        if self.threshold is not None and not 0 < self.threshold <= 1:
            raise ConfigError(f"threshold must lie in (0, 1], got {self.threshold!r}")
        if self.max_rounds is not None and self.max_rounds < 0:
            raise ConfigError("max_rounds must be >= 0")
        if self.decay_ms is not None and self.decay_ms <= 0:
            raise ConfigError("decay_ms must be > 0")
        if self.per_entity_qg_cap is not None and self.per_entity_qg_cap < 1:
            raise ConfigError("per_entity_qg_cap must be >= 1")
        if self.window < _BATCH:
            raise ConfigError(f"window must be >= {_BATCH}")

    def engine_config(self) -> EngineConfig:
        return EngineConfig(self.max_rounds, self.decay_ms, self.per_entity_qg_cap, self.alert_updates)

    @classmethod
    def load(cls, overrides: dict[str, Any] | None = None, config_file: str | None = None) -> PipelineConfig:
        """Defaults, then the JSON config file (``TAGSTREAM_CONFIG``), then overrides."""
        values: dict[str, Any] = {}
        path = config_file or os.environ.get(CONFIG_ENV)
        if path:
            try:
                doc = json.loads(Path(path).read_text(encoding="utf-8"))
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            if not isinstance(doc, dict):
                raise ConfigError(f"config {path} must hold a JSON object")
            values.update(doc)
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if isinstance(values.get("query_graphs"), str):
            values["query_graphs"] = [values["query_graphs"]]
        cfg = cls(**values)
        cfg.validate()
        return cfg


@dataclass
class MetricsSnapshot:
    events_in: int = 0
    parse_errors: int = 0
    elapsed_s: float = 0.0
    eps: float = 0.0
    tags_initialized: int = 0
    tags_propagated: int = 0
    tags_removed: int = 0
    active_tags: int = 0
    alerts: int = 0
    audit_failures: int = 0
    partitions: list[dict] = field(default_factory=list)

    def summary_line(self) -> str:
        keys = ("events_in", "parse_errors", "eps", "tags_initialized", "tags_propagated", "tags_removed", "active_tags", "alerts")
        parts = []
        for k in keys:
            v = getattr(self, k)
            parts.append(f"{k}={v:.1f}" if isinstance(v, float) else f"{k}={v}")
        return " ".join(parts)


@dataclass
class RunSummary:
    metrics: MetricsSnapshot
    alerts: list[Alert]
    samples: list[tuple[int, int]]  # merged (event_ts_ms, active_tags) series

    @property
    def alert_count(self) -> int:
        return sum(1 for a in self.alerts if not a.update)

    @property
    def events_in(self) -> int:
        return self.metrics.events_in


def host_of_line(line: bytes) -> str:
    """Host field of a raw NDJSON line without a full parse."""
    i = line.find(b'"host"')
    if i < 0:
        return DEFAULT_HOST
    j = line.find(b'"', line.find(b":", i + 6) + 1)
    k = line.find(b'"', j + 1)
    if j < 0 or k < 0:
        return DEFAULT_HOST
    return line[j + 1 : k].decode("utf-8", "replace")


def route_host(host: str, partitions: int) -> int:
    if partitions <= 1:
        return 0
    # adler32 spreads sequentially numbered host names evenly, crc32 does not
    return zlib.adler32(host.encode("utf-8")) % partitions


def partition_route(ev: Event, partitions: int) -> int:
    """Stable partition for an event: adler32 of its host modulo the count."""
    return route_host(ev.subject.host, partitions)


class Partition:
    """Parse + align stages for one partition, with event-time sweeps."""

    def __init__(self, pid: int, graphs: list[QueryGraph], cfg: PipelineConfig):
        self.pid = pid
        self.cfg = cfg
        self.parser = EventParser()
        self.engine = TagEngine(graphs, cfg.engine_config(), thresholds=cfg.threshold)
        self.events_in = 0
        self.parse_errors = 0
        self.audit_failures = 0
        self.order_violations = 0
        self.last_sweep: int | None = None
        self.last_ts = -1
        self.samples: list[tuple[int, int]] = []

    def feed_line(self, line: bytes | str) -> list[Alert]:
        try:
            ev = self.parser.parse(line, self.events_in)
        except ParseError as exc:
            self.parse_errors += 1
            log.debug("partition %d: %s", self.pid, exc)
            return []
        if ev is None:
            return []
        return self.feed(ev)

    def feed(self, ev: Event) -> list[Alert]:
        self.events_in += 1
        ts = ev.ts
        if ts < self.last_ts:
            self.order_violations += 1
        else:
            self.last_ts = ts
        if self.last_sweep is None:
            self.last_sweep = ts
            self.samples.append((ts, 0))
        elif ts - self.last_sweep >= self.cfg.sweep_interval_ms:
            self.sweep(ts)
        return self.engine.process_event(ev)

    def sweep(self, now: int) -> int:
        removed = self.engine.sweep_expired(now)
        self.last_sweep = now
        if self.cfg.audit:
            self.audit_failures += self.engine.audit_expired(now)
        self.samples.append((now, self.engine.counters.active_tags))
        return removed

    def finish(self) -> None:
        if self.last_ts >= 0:
            self.samples.append((self.last_ts, self.engine.counters.active_tags))

    def stats(self) -> dict:
        c = self.engine.counters
        return {
            "partition": self.pid,
            "events_in": self.events_in,
            "parse_errors": self.parse_errors,
            "tags_initialized": c.tags_initialized,
            "tags_propagated": c.tags_propagated,
            "tags_removed": c.tags_removed,
            "active_tags": c.active_tags,
            "alerts": c.alerts,
            "audit_failures": self.audit_failures,
            "order_violations": self.order_violations,
        }


def sample_metrics(parts: Iterable[dict], elapsed_s: float) -> MetricsSnapshot:
    """Sum per-partition counter snapshots into one MetricsSnapshot."""
    parts = list(parts)
    m = MetricsSnapshot(elapsed_s=elapsed_s, partitions=parts)
    for p in parts:
        m.events_in += p["events_in"]
        m.parse_errors += p["parse_errors"]
        m.tags_initialized += p["tags_initialized"]
        m.tags_propagated += p["tags_propagated"]
        m.tags_removed += p["tags_removed"]
        m.active_tags += p["active_tags"]
        m.alerts += p["alerts"]
        m.audit_failures += p.get("audit_failures", 0)
    m.eps = m.events_in / elapsed_s if elapsed_s > 0 else 0.0
    return m


def merge_samples(series: list[list[tuple[int, int]]]) -> list[tuple[int, int]]:
    """Step-sum of per-partition gauges at every sample instant."""
    if len(series) == 1:
        return list(series[0])
    points = sorted((ts, i, v) for i, s in enumerate(series) for ts, v in s)
    latest = [0] * len(series)
    out: list[tuple[int, int]] = []
    for ts, i, v in points:
        latest[i] = v
        total = sum(latest)
        if out and out[-1][0] == ts:
            out[-1] = (ts, total)
        else:
            out.append((ts, total))
    return out


# -- sources -----------------------------------------------------------------


def _open_input(spec: str) -> BinaryIO:
    if spec == "-":
        return sys.stdin.buffer
    try:
        return open(spec, "rb")
    except OSError as exc:
        raise InputUnavailable(f"cannot open input {spec}: {exc.strerror or exc}") from None


def _parse_tcp(spec: str) -> tuple[str, int]:
    addr = spec[len("tcp://") :]
    host, _, port = addr.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise ConfigError(f"bad tcp address {spec!r}") from None


def tcp_lines(
    host: str,
    port: int,
    shutdown: threading.Event,
    on_listen: Callable[[tuple[str, int]], None] | None = None,
    poll_s: float = 0.1,
) -> Iterator[bytes]:
    """NDJSON lines from any number of sequential TCP clients until shutdown."""
    try:
        srv = socket.create_server((host, port))
    except OSError as exc:
        raise InputUnavailable(f"cannot listen on {host}:{port}: {exc.strerror or exc}") from None
    srv.settimeout(poll_s)
    if on_listen is not None:
        on_listen(srv.getsockname()[:2])
    try:
        while not shutdown.is_set():
            try:
                conn, _ = srv.accept()
            except socket.timeout:
                continue
            conn.settimeout(poll_s)
            buf = b""
            with conn:
                while not shutdown.is_set():
                    try:
                        chunk = conn.recv(65536)
                    except socket.timeout:
                        continue
                    if not chunk:
                        break
                    buf += chunk
                    *lines, buf = buf.split(b"\n")
                    yield from lines
            if buf.strip():
                yield buf
    finally:
        srv.close()


def iter_input(cfg: PipelineConfig, shutdown: threading.Event | None = None, on_listen=None) -> Iterator[bytes]:
    if cfg.input.startswith("tcp://"):
        host, port = _parse_tcp(cfg.input)
        yield from tcp_lines(host, port, shutdown or threading.Event(), on_listen)
        return
    f = _open_input(cfg.input)
    try:
        yield from f
    finally:
        if f is not sys.stdin.buffer:
            f.close()


def count_hosts(path: str, limit: int = 1024) -> int:
    """Distinct hosts in a file (stops counting at ``limit``)."""
    hosts = set()
    with open(path, "rb") as f:
        for line in f:
            hosts.add(host_of_line(line))
            if len(hosts) >= limit:
                break
    return max(1, len(hosts))


def default_partitions(cfg: PipelineConfig) -> int:
    cpus = os.cpu_count() or 1
    if cpus == 1 or cfg.input == "-" or cfg.input.startswith("tcp://"):
        return 1
    try:
        return max(1, min(count_hosts(cfg.input, cpus), cpus))
    except OSError as exc:
        raise InputUnavailable(f"cannot open input {cfg.input}: {exc.strerror or exc}") from None


# -- pipeline ------------------------------------------------------------------


def load_graphs(cfg: PipelineConfig) -> list[QueryGraph]:
    try:
        graphs = load_query_graphs(cfg.query_graphs)
    except (OSError, LoadError) as exc:
        raise QueryGraphLoadError(str(exc)) from None
    for g in graphs:
        if g.errors:
            raise QueryGraphLoadError(f"{g.id}: " + "; ".join(str(d) for d in g.errors))
    if not graphs:
        raise QueryGraphLoadError("no query graphs found")
    return graphs


def _alert_key(a: Alert) -> tuple:
    return (a.trigger_ts, a.host, a.qg, a.seed_entity, a.update, a.score)


class _AlertSink:
    def __init__(self, path: str | None, streaming: bool):
        self.path = path
        self.streaming = streaming
        self.alerts: list[Alert] = []
        self._f = open(path, "w", encoding="utf-8") if path else None

    def add(self, alerts: list[Alert]) -> None:
        self.alerts.extend(alerts)
        if self._f is not None and self.streaming:
            for a in alerts:
                self._f.write(render_alert(a, "json"))
            self._f.flush()

    def close(self) -> list[Alert]:
        if not self.streaming:
            self.alerts.sort(key=_alert_key)
            if self._f is not None:
                for a in self.alerts:
                    self._f.write(render_alert(a, "json"))
        if self._f is not None:
            self._f.close()
        return self.alerts


def write_metrics(path: str, samples: list[tuple[int, int]], metrics: MetricsSnapshot) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("event_ts_ms,active_tags\n")
        for ts, v in samples:
            f.write(f"{ts},{v}\n")
        f.write(f"# summary {metrics.summary_line()}\n")


def run_pipeline(
    cfg: PipelineConfig,
    shutdown: threading.Event | None = None,
    on_listen: Callable[[tuple[str, int]], None] | None = None,
    graphs: list[QueryGraph] | None = None,
) -> RunSummary:
    cfg.validate()
    if graphs is None:
        graphs = load_graphs(cfg)
    streaming = cfg.input == "-" or cfg.input.startswith("tcp://")
    if not streaming and not Path(cfg.input).is_file():
        raise InputUnavailable(f"input {cfg.input} does not exist")
    n = cfg.partitions or default_partitions(cfg)
    sink = _AlertSink(cfg.alerts_out, streaming)
    start = time.perf_counter()
    try:
        if n == 1:
            stats, series = _run_inline(cfg, graphs, sink, shutdown, on_listen)
        else:
            stats, series = _run_parallel(cfg, graphs, n, sink, shutdown, on_listen)
    finally:
        alerts = sink.close()
    elapsed = time.perf_counter() - start
    metrics = sample_metrics(stats, elapsed)
    samples = merge_samples(series)
    if cfg.metrics_out:
        write_metrics(cfg.metrics_out, samples, metrics)
    return RunSummary(metrics, alerts, samples)


def _run_inline(cfg, graphs, sink, shutdown, on_listen):
    part = Partition(0, graphs, cfg)
    feed = part.feed_line
    add = sink.add
    for line in iter_input(cfg, shutdown, on_listen):
        out = feed(line)
        if out:
            add(out)
    part.finish()
    return [part.stats()], [part.samples]


def _worker(pid: int, graphs, cfg: PipelineConfig, inbox, outbox) -> None:
    part = Partition(pid, graphs, cfg)
    try:
        while True:
            batch = inbox.get()
            if batch is None:
                break
            alerts = []
            for line in batch:
                alerts.extend(part.feed_line(line))
            if alerts:
                outbox.put(("alerts", pid, [a.to_doc() for a in alerts]))
        part.finish()
        outbox.put(("done", pid, (part.stats(), part.samples, _census(part))))
    except Exception as exc:  # pragma: no cover - surfaced in the parent
        outbox.put(("error", pid, repr(exc)))


def _census(part: Partition) -> int:
    return len(part.engine.tags)


def _run_parallel(cfg, graphs, n, sink, shutdown, on_listen):
    ctx = mp.get_context("fork")
    # bound the in-flight backlog per partition to the configured window
    depth = max(1, cfg.window // _BATCH)
    inboxes = [ctx.Queue(maxsize=depth) for _ in range(n)]
    outbox = ctx.Queue()
    procs = [ctx.Process(target=_worker, args=(i, graphs, cfg, inboxes[i], outbox), daemon=True) for i in range(n)]
    for p in procs:
        p.start()
    results: dict[int, tuple] = {}
    errors: list[str] = []

    def drain(block: bool) -> None:
        while True:
            try:
                kind, pid, payload = outbox.get(block=block, timeout=0.5 if block else None)
            except queue.Empty:
                return
            if kind == "alerts":
                sink.add([alert_from_doc(d) for d in payload])
            elif kind == "done":
                results[pid] = payload
            else:
                errors.append(f"partition {pid}: {payload}")
            block = False

    batches: list[list[bytes]] = [[] for _ in range(n)]
    cache: dict[bytes, int] = {}
    try:
        for line in iter_input(cfg, shutdown, on_listen):
            i = line.find(b'"host"')
            key = line[i : line.find(b",", i)] if i >= 0 else b""
            pid = cache.get(key)
            if pid is None:
                pid = cache[key] = route_host(host_of_line(line), n)
            b = batches[pid]
            b.append(line)
            if len(b) >= _BATCH:
                inboxes[pid].put(b)
                batches[pid] = []
                if not outbox.empty():
                    drain(False)
        for pid in range(n):
            if batches[pid]:
                inboxes[pid].put(batches[pid])
            inboxes[pid].put(None)
        while len(results) < n and not errors:
            drain(True)
            if not any(p.is_alive() for p in procs) and len(results) < n:
                drain(False)
                if len(results) < n:
                    errors.append("worker exited early")
    finally:
        for p in procs:
            p.join(timeout=5)
            if p.is_alive():
                p.terminate()
    if errors:
        raise RuntimeError("; ".join(errors))
    stats = [results[i][0] for i in range(n)]
    for i in range(n):
        stats[i]["entities_tagged"] = results[i][2]
    return stats, [results[i][1] for i in range(n)]


def summary_dict(s: RunSummary) -> dict:
    d = asdict(s.metrics)
    d["alerts"] = s.alert_count
    return d
