"""Figures for the report command (rendered off-screen to files)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .report import SweepRow  # noqa: E402


def plot_threshold_sweep(rows: Sequence[SweepRow], path: str | Path) -> Path:
    t = [r.threshold for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(t, [r.precision for r in rows], marker="o", label="precision")
    ax.plot(t, [r.recall for r in rows], marker="s", label="recall")
    ax.plot(t, [r.f1 for r in rows], marker="^", label="F1")
    ax.set_xlabel("alignment threshold")
    ax.set_ylabel("value")
    ax.set_ylim(-0.02, 1.05)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_active_tags(samples: Sequence[tuple[int, int]], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    if samples:
        t0 = samples[0][0]
        hours = [(ts - t0) / 3_600_000 for ts, _ in samples]
        ax.step(hours, [v for _, v in samples], where="post", linewidth=1)
    ax.set_xlabel("event time (h)")
    ax.set_ylabel("active tags")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
