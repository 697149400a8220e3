"""Offline threshold sweeps over recorded alerts against ground truth."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable

from .scoring import crosses
from .tracegen import GroundTruth


class ThresholdSpecError(ValueError):
    pass


def parse_thresholds(spec: str) -> list[float]:
    """``lo:hi:step`` -> inclusive list; the row count is round((hi-lo)/step)+1."""
    try:
        lo, hi, step = (float(x) for x in spec.split(":"))
    except ValueError:
        raise ThresholdSpecError(f"expected lo:hi:step, got {spec!r}") from None
    if step <= 0 or hi < lo:
        raise ThresholdSpecError(f"need step > 0 and hi >= lo, got {spec!r}")
    n = round((hi - lo) / step) + 1
    return [round(lo + i * step, 10) for i in range(n)]


def load_alert_docs(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(json.loads(line))
    return out


def best_scores(alerts: Iterable[dict]) -> dict[tuple, float]:
    """Highest score seen per alignment, keyed by (qg, host, seed entity).

    Alerts recorded with update lines carry the improved scores of an
    alignment after its first crossing; the maximum is its final score.
    """
    best: dict[tuple, float] = {}
    for a in alerts:
        key = (a["qg"], a["host"], a.get("seed", ""))
        if a["score"] > best.get(key, -1.0):
            best[key] = a["score"]
    return best


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float


def sweep(alerts: Iterable[dict], truth: GroundTruth, thresholds: Iterable[float]) -> list[SweepRow]:
    best = best_scores(alerts)
    positives = {(r.qg, r.host) for r in truth.attacks}
    rows = []
    for t in thresholds:
        hit = [k for k, s in best.items() if crosses(s, t)]
        found = {(q, h) for q, h, _ in hit if (q, h) in positives}
        fp = sum(1 for q, h, _ in hit if (q, h) not in positives)
        tp = len(found)
        fn = len(positives) - tp
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / len(positives) if positives else 1.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        rows.append(SweepRow(t, tp, fp, fn, precision, recall, f1))
    return rows


def write_sweep_csv(rows: list[SweepRow], out: IO[str]) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["threshold", "tp", "fp", "fn", "precision", "recall", "f1"])
    for r in rows:
        w.writerow([f"{r.threshold:g}", r.tp, r.fp, r.fn, f"{r.precision:.4f}", f"{r.recall:.4f}", f"{r.f1:.4f}"])


def best_f1_threshold(rows: list[SweepRow]) -> float:
    """Threshold of the first row achieving the maximal F1."""
    top = max(r.f1 for r in rows)
    return next(r.threshold for r in rows if r.f1 == top)


def read_metrics_csv(path: str | Path) -> list[tuple[int, int]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for row in csv.reader(line for line in f if not line.startswith("#")):
            if row and row[0] != "event_ts_ms":
                out.append((int(row[0]), int(row[1])))
    return out
