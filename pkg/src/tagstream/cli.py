"""Command line: run, validate, gen, bench, report."""

from __future__ import annotations

import argparse
import logging
import resource
import signal
import sys
import threading
from pathlib import Path

from .query_graph import LoadError, load_query_graph_file, shipped_graph_paths
from .report import ThresholdSpecError, load_alert_docs, parse_thresholds, read_metrics_csv, sweep, write_sweep_csv
from .scoring import render_alert
from .stream_runtime import (
    ConfigError,
    InputUnavailable,
    PipelineConfig,
    QueryGraphLoadError,
    run_pipeline,
)
from .tracegen import TEMPLATES, GroundTruth, InjectionPlan, threshold_corpus_plans, write_labeled_trace

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _k_range(spec: str) -> tuple[int, int]:
    lo, _, hi = spec.partition(":")
    try:
        a, b = int(lo), int(hi or lo)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected k or lo:hi, got {spec!r}") from None
    if a < 0 or b < a:
        raise argparse.ArgumentTypeError(f"bad range {spec!r}")
    return a, b


def _qg_list(spec: str) -> list[str]:
    out = [s.strip() for s in spec.split(",") if s.strip()]
    for q in out:
        if q not in TEMPLATES:
            raise argparse.ArgumentTypeError(f"no template for {q!r} (have {', '.join(sorted(TEMPLATES))})")
    return out


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tagstream", description="Streaming attack-pattern alignment over audit events.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="align an event stream against query graphs")
    r.add_argument("--input", required=True, help="NDJSON file, '-' for stdin, or tcp://host:port")
    r.add_argument("--query-graphs", nargs="+", help="graph files or directories (default: shipped samples)")
    r.add_argument("--threshold", type=float, help="alert threshold override for every graph")
    r.add_argument("--decay-rounds", type=int, help="max cached path length (default 6)")
    r.add_argument("--decay-seconds", type=float, help="event-time tag lifetime (default 14400)")
    r.add_argument("--sweep-interval-ms", type=int, help="event-time sweep period (default 60000)")
    r.add_argument("--cap", type=int, help="tags per entity per graph (default 4)")
    r.add_argument("--partitions", type=_positive_int, help="partition count (default: host count, capped by cpus)")
    r.add_argument("--alerts-out", help="append-only NDJSON alert file")
    r.add_argument("--metrics-out", help="CSV of active tags per sweep plus a summary line")
    r.add_argument("--alert-updates", action="store_true", help="also record score improvements after the first alert")
    r.add_argument("--audit", action="store_true", help="check for expired residents after every sweep")
    r.add_argument("--table", action="store_true", help="print each alert as a table on stdout")
    r.add_argument("--config", help="JSON config file (overrides $TAGSTREAM_CONFIG)")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="check query graph files")
    v.add_argument("paths", nargs="*", help="graph files or directories (default: shipped samples)")
    v.set_defaults(func=cmd_validate)

    g = sub.add_parser("gen", help="generate a labeled synthetic trace")
    g.add_argument("--events", type=int, default=10_000, help="benign events")
    g.add_argument("--hosts", type=_positive_int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--inject", type=_qg_list, action="append", default=[], help="comma list of graph ids to plant")
    g.add_argument("--near-miss", type=_qg_list, action="append", default=[], help="plant half-edge partial attacks")
    g.add_argument("--mutate-in-chain", type=_k_range, help="gadget chain hops per edge, k or lo:hi")
    g.add_argument("--mutate-around", type=int, default=0, help="benign events attached to attack entities")
    g.add_argument("--mutate-names", action="store_true", help="swap tool names among admitted alternatives")
    g.add_argument("--threshold-corpus", action="store_true", help="plant 20 attacks and 20 near misses")
    g.add_argument("--seed-noise", type=float, default=0.0, help="fraction of events from seed-matching processes")
    g.add_argument("--spacing-ms", type=float, default=10.0, help="mean gap between events")
    g.add_argument("--out", default="-", help="trace path (default stdout)")
    g.add_argument("--ground-truth", help="sidecar ground-truth JSON path")
    g.set_defaults(func=cmd_gen)

    b = sub.add_parser("bench", help="measure throughput on a trace")
    b.add_argument("--input", required=True)
    b.add_argument("--repeat", type=_positive_int, default=3)
    b.add_argument("--partitions", type=_positive_int, default=1)
    b.add_argument("--query-graphs", nargs="+")
    b.set_defaults(func=cmd_bench)

    rp = sub.add_parser("report", help="precision/recall/F1 over a threshold sweep")
    rp.add_argument("--alerts", required=True, help="alerts NDJSON recorded at the lowest threshold")
    rp.add_argument("--ground-truth", required=True)
    rp.add_argument("--thresholds", default="0.5:0.9:0.05", help="lo:hi:step")
    rp.add_argument("--out", default="-", help="CSV path (default stdout)")
    rp.add_argument("--figure", help="PNG with precision/recall/F1 curves")
    rp.add_argument("--metrics", help="metrics CSV from run; plotted with --metrics-figure")
    rp.add_argument("--metrics-figure", help="PNG of active tags over event time")
    rp.set_defaults(func=cmd_report)
    return p


# -- commands --------------------------------------------------------------------


def _run_config(args: argparse.Namespace) -> PipelineConfig:
    overrides = {
        "input": args.input,
        "query_graphs": args.query_graphs,
        "threshold": args.threshold,
        "max_rounds": args.decay_rounds,
        "decay_ms": None if args.decay_seconds is None else int(round(args.decay_seconds * 1000)),
        "sweep_interval_ms": args.sweep_interval_ms,
        "per_entity_qg_cap": args.cap,
        "partitions": args.partitions,
        "alerts_out": args.alerts_out,
        "metrics_out": args.metrics_out,
        "alert_updates": args.alert_updates or None,
        "audit": args.audit or None,
    }
    return PipelineConfig.load(overrides, args.config)


def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = _run_config(args)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    shutdown = threading.Event()
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGINT, signal.SIGTERM):
            signal.signal(sig, lambda *_: shutdown.set())

    def announce(addr):
        print(f"listening on {addr[0]}:{addr[1]}", file=sys.stderr, flush=True)

    summary = run_pipeline(cfg, shutdown=shutdown, on_listen=announce)
    if args.table:
        for a in summary.alerts:
            sys.stdout.write(render_alert(a, "table"))
    m = summary.metrics
    print(f"events: {m.events_in}")
    print(f"parse errors: {m.parse_errors}")
    print(f"alerts: {summary.alert_count}")
    print(f"tags: initialized={m.tags_initialized} propagated={m.tags_propagated} removed={m.tags_removed} active={m.active_tags}")
    print(f"throughput: {m.eps:.0f} events/s over {m.elapsed_s:.2f}s ({len(m.partitions)} partition(s))")
    if cfg.audit:
        print(f"audit failures: {m.audit_failures}")
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    files: list[Path] = []
    for p in map(Path, args.paths) if args.paths else shipped_graph_paths():
        files.extend(sorted(p.glob("*.json")) if p.is_dir() else [p])
    if not files:
        raise UsageError("no graph files given")
    ok = 0
    failed = False
    for f in files:
        try:
            g = load_query_graph_file(f)
        except OSError as exc:
            print(f"{f}: error: {exc.strerror or exc}")
            failed = True
            continue
        except LoadError as exc:
            print(f"{f}: error: {exc}")
            failed = True
            continue
        for d in g.diagnostics:
            print(f"{f}: {d}")
        if g.errors:
            failed = True
        else:
            ok += 1
            print(f"{f}: OK {g.id} ({len(g.nodes)} nodes, {g.edge_count} edges)")
    print(f"{ok} graph{'s' if ok != 1 else ''} OK")
    return EXIT_FAIL if failed else EXIT_OK


def _plans(args: argparse.Namespace) -> list[InjectionPlan]:
    import random

    rng = random.Random(args.seed)
    plans: list[InjectionPlan] = []
    if args.threshold_corpus:
        plans.extend(threshold_corpus_plans(rng_seed=args.seed))
    attacks = [q for group in args.inject for q in group]
    near = [q for group in args.near_miss for q in group]
    lo, hi = args.mutate_in_chain or (0, 0)
    for i, q in enumerate(attacks):
        plans.append(
            InjectionPlan(q, f"h{i}" if i < args.hosts else f"inj{i}", rng.randint(lo, hi), args.mutate_around, mutate_names=args.mutate_names)
        )
    for i, q in enumerate(near):
        plans.append(InjectionPlan(q, f"near{i}", rng.randint(lo, hi), args.mutate_around, near_miss=True))
    return plans


def cmd_gen(args: argparse.Namespace) -> int:
    if args.events < 0:
        raise UsageError("--events must be >= 0")
    if not 0 <= args.seed_noise <= 1:
        raise UsageError("--seed-noise must lie in [0, 1]")
    plans = _plans(args)
    if args.out == "-":
        truth = write_labeled_trace(sys.stdout, args.events, args.hosts, plans, args.seed, args.seed_noise, args.spacing_ms)
    else:
        with open(args.out, "w", encoding="utf-8") as f:
            truth = write_labeled_trace(f, args.events, args.hosts, plans, args.seed, args.seed_noise, args.spacing_ms)
    if args.ground_truth:
        truth.dump(args.ground_truth)
    print(
        f"wrote {args.events} benign events, {len(truth.attacks)} attacks, {len(truth.near_misses)} near misses",
        file=sys.stderr,
    )
    return EXIT_OK


def _peak_rss_mb() -> float:
    own = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    kids = resource.getrusage(resource.RUSAGE_CHILDREN).ru_maxrss
    return max(own, kids) / 1024.0


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = PipelineConfig(input=args.input, query_graphs=args.query_graphs, partitions=args.partitions)
    rates = []
    for i in range(args.repeat):
        s = run_pipeline(cfg)
        rates.append(s.metrics.eps)
        print(f"run {i + 1}: {s.metrics.events_in} events in {s.metrics.elapsed_s:.2f}s = {s.metrics.eps:.0f} eps, alerts {s.alert_count}")
    print(f"eps: best {max(rates):.0f} mean {sum(rates) / len(rates):.0f}")
    print(f"peak rss: {_peak_rss_mb():.1f} MiB")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    try:
        thresholds = parse_thresholds(args.thresholds)
    except ThresholdSpecError as exc:
        raise UsageError(str(exc)) from None
    try:
        alerts = load_alert_docs(args.alerts)
        truth = GroundTruth.load(args.ground_truth)
    except OSError as exc:
        raise InputUnavailable(f"{exc.filename}: {exc.strerror}") from None
    rows = sweep(alerts, truth, thresholds)
    if args.out == "-":
        write_sweep_csv(rows, sys.stdout)
    else:
        with open(args.out, "w", encoding="utf-8") as f:
            write_sweep_csv(rows, f)
    if args.figure or args.metrics_figure:
        from . import plotting

        if args.figure:
            plotting.plot_threshold_sweep(rows, args.figure)
        if args.metrics_figure:
            if not args.metrics:
                raise UsageError("--metrics-figure needs --metrics")
            plotting.plot_active_tags(read_metrics_csv(args.metrics), args.metrics_figure)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"tagstream: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputUnavailable, QueryGraphLoadError, ConfigError) as exc:
        print(f"tagstream: error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except BrokenPipeError:
        return EXIT_OK
