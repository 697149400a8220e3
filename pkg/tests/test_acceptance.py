"""End-to-end acceptance checks, one test per criterion.

Each test records PASS/FAIL/SKIP through ``criterion`` so the terminal summary
prints one line per criterion. Large traces are generated once per session.
"""

from __future__ import annotations

import csv
import os
import time

import pytest

from conftest import WORKED_LINES, criterion
from tagstream.cli import main
from tagstream.event_model import EventParser
from tagstream.oracle import engine_view, oracle_align, oracle_view
from tagstream.scoring import render_alert
from tagstream.stream_runtime import PipelineConfig, run_pipeline
from tagstream.tag_engine import EngineConfig, TagEngine
from tagstream.tracegen import TEMPLATES, gen_benign, inject_attack, mutate_around, mutate_in_chain, random_trace, template, write_benign

BENIGN_EVENTS = 10_000_000
REFERENCE_EPS = 137_000
TARGET_EPS = 100_000
FLOOR_EPS = 20_000


@pytest.fixture(scope="session")
def benign_10m(tmp_path_factory):
    path = tmp_path_factory.mktemp("floor") / "benign.ndjson"
    with open(path, "w", encoding="utf-8") as f:
        write_benign(f, BENIGN_EVENTS, 4, 2024)
    yield path
    path.unlink()


@pytest.fixture(scope="session")
def benign_run(benign_10m):
    return run_pipeline(PipelineConfig(input=str(benign_10m), partitions=1))


def test_criterion_1_worked_example(graphs):
    with criterion(1, "worked example exactness") as c:
        start = time.perf_counter()
        parser = EventParser()
        events = [parser.parse(line, i) for i, line in enumerate(WORKED_LINES)]
        alerts = TagEngine(graphs.values(), EngineConfig()).run(events)
        table = render_alert(alerts[0], "table") if alerts else ""
        elapsed = time.perf_counter() - start
        assert len(alerts) == 1 and alerts[0].qg == "QG2"
        assert alerts[0].edge_scores() == {"e1": 1.5, "e2": 2.0, "e3": 2.0}
        assert abs(alerts[0].score - 5.5 / 6) <= 1e-9
        cells = [line.split(" | ") for line in table.splitlines()]
        rows = {c[0].strip(): c[2].strip() for c in cells if len(c) == 4}
        assert rows["n1"] == "firefox"
        assert rows["n2"] == r"C:\temp\evil.dll"
        assert rows["n3"] == "reg.exe"
        assert rows["n4"] == r"hkcu\software\microsoft\windows\currentVersion\run\k"
        assert rows["e1"] == r"(firefox -write-> C:\temp\x.sh) (C:\temp\x.sh -create-> C:\temp\evil.dll)"
        assert rows["Total"] == "" and table.rstrip().endswith("5.5/6")
        assert elapsed < 1.0
        c.note(f"score {alerts[0].score:.5f}, {elapsed * 1000:.1f} ms")


def test_criterion_2_oracle_equivalence(graphs):
    with criterion(2, "oracle equivalence over 1000 random traces") as c:
        start = time.perf_counter()
        planted = set()
        compared = 0
        for seed in range(1000):
            trace, chosen = random_trace(seed, 200)
            planted.update(chosen)
            eng = TagEngine(graphs.values(), EngineConfig.unbounded())
            eng.run(trace)
            statuses = eng.live_statuses()
            for g in graphs.values():
                results = oracle_align(trace, g)
                assert engine_view(statuses, g) == oracle_view(results), (seed, g.id)
                root = g.seeds[0].node
                engine_scores = {s.nodes[root].entity.id: s.score for s in statuses if s.qg == g.id and s.edges}
                for r in results:
                    assert engine_scores[r.seed.id] == r.score, (seed, g.id)
                    compared += 1
        elapsed = time.perf_counter() - start
        assert planted == set(TEMPLATES)
        assert elapsed < 300
        c.note(f"{compared} alignments identical, {elapsed:.1f} s")


def test_criterion_3_evasion_robustness(graphs):
    with criterion(3, "in-chain and around insertion robustness") as c:
        lowest = 1.0
        for qg in sorted(TEMPLATES):
            base, gt = inject_attack(gen_benign(60, 1, 3), template(qg), 30)
            eng = TagEngine([graphs[qg]], EngineConfig())
            before = [a.score for a in eng.run(base)]
            for k in range(1, 5):
                trace, gt_k = mutate_in_chain(base, gt, k, k)
                assert set(gt_k.attacks[0].edges.values()) == {k + 1}
                eng_k = TagEngine([graphs[qg]], EngineConfig())
                alerts = eng_k.run(trace)
                (status,) = [s for s in eng_k.live_statuses() if s.edges]
                assert len(alerts) == 1, (qg, k)
                assert status.score >= 0.6, (qg, k)
                lowest = min(lowest, status.score)
                if k == 4:
                    assert status.score == pytest.approx(0.6, abs=1e-12)
            for k in range(1, 21):
                eng_a = TagEngine([graphs[qg]], EngineConfig())
                after = [a.score for a in eng_a.run(mutate_around(base, gt, k, k)[0])]
                assert after == before, (qg, k)
        c.note(f"lowest in-chain score {lowest:.4f}")


def test_criterion_4_decay_bounds(tmp_path):
    with criterion(4, "active tags plateau under decay") as c:
        path = tmp_path / "noisy.ndjson"
        with open(path, "w", encoding="utf-8") as f:
            write_benign(f, 1_000_000, 4, 77, seed_noise=0.01, spacing_ms=100)
        cfg = PipelineConfig(input=str(path), partitions=1, max_rounds=6, decay_ms=4 * 3600 * 1000, audit=True)
        s = run_pipeline(cfg)
        path.unlink()
        values = [v for _, v in s.samples]
        q = len(values) // 4
        second, last = max(values[q : 2 * q]), max(values[3 * q :])
        assert s.metrics.tags_initialized > 0
        assert last <= 2 * second
        assert s.metrics.audit_failures == 0
        c.note(f"{len(values)} sweeps, Q2 max {second}, Q4 max {last}, audit failures 0")


def test_criterion_5_false_positive_floor(benign_run):
    with criterion(5, "no alerts or tags on 10M benign events") as c:
        m = benign_run.metrics
        assert m.events_in == BENIGN_EVENTS
        assert benign_run.alert_count == 0
        assert m.tags_initialized == 0
        assert m.elapsed_s < 180
        c.note(f"{m.elapsed_s:.1f} s")


def test_criterion_6_throughput(benign_run):
    with criterion(6, "single partition throughput") as c:
        eps = benign_run.metrics.eps
        verdict = "meets" if eps >= TARGET_EPS else "below"
        c.note(f"{eps / 1000:.0f}K eps, {verdict} the {TARGET_EPS // 1000}K target; reference {REFERENCE_EPS // 1000}K eps")
        assert eps >= FLOOR_EPS


def test_criterion_7_scaling(tmp_path):
    with criterion(7, "throughput scaling over partitions") as c:
        path = tmp_path / "hosts4.ndjson"
        with open(path, "w", encoding="utf-8") as f:
            write_benign(f, 400_000, 4, 9, seed_noise=0.01)
        eps = [run_pipeline(PipelineConfig(input=str(path), partitions=n)).metrics.eps for n in range(1, 5)]
        c.note(" ".join(f"p{n}={e / 1000:.0f}K" for n, e in enumerate(eps, 1)))
        cpus = len(os.sched_getaffinity(0))
        if cpus < 4:
            pytest.skip(f"needs >= 4 cores, found {cpus}; measured {c.detail}")
        assert all(b > a for a, b in zip(eps, eps[1:]))
        assert eps[3] >= 2 * eps[0]


def test_criterion_8_threshold_sweep(tmp_path, capsys):
    with criterion(8, "threshold sweep shape") as c:
        trace, gt = tmp_path / "corpus.ndjson", tmp_path / "gt.json"
        alerts, out = tmp_path / "alerts.ndjson", tmp_path / "sweep.csv"
        assert main(["gen", "--events", "50000", "--hosts", "4", "--seed", "8", "--threshold-corpus", "--out", str(trace), "--ground-truth", str(gt)]) == 0
        assert main(["run", "--input", str(trace), "--threshold", "0.5", "--alert-updates", "--alerts-out", str(alerts)]) == 0
        rc = main(["report", "--alerts", str(alerts), "--ground-truth", str(gt), "--thresholds", "0.5:0.9:0.05", "--out", str(out), "--figure", str(tmp_path / "sweep.png")])
        assert rc == 0
        capsys.readouterr()
        rows = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(out.open())]
        recall = [r["recall"] for r in rows]
        precision = [r["precision"] for r in rows]
        assert all(b <= a for a, b in zip(recall, recall[1:]))
        assert all(b >= a for a, b in zip(precision, precision[1:]))
        best = max(rows, key=lambda r: r["f1"])
        assert 0.55 <= best["threshold"] <= 0.75
        c.note(f"best F1 {best['f1']:.3f} at {best['threshold']:.2f}")
