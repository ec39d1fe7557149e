"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN_RATIO = 1.618
WIDTH = 5.0

plt.rcParams.update({
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
})


def loss_curve(entries: Sequence[dict], path: str | Path) -> Path:
    """Per-step training loss and per-epoch validation macro F1."""
    steps = [e for e in entries if e.get("kind") == "step"]
    vals = [e for e in entries if e.get("kind") == "val"]
    fig, ax = plt.subplots(figsize=(WIDTH, WIDTH / GOLDEN_RATIO))
    ax.plot([e["global_step"] for e in steps], [e["loss"] for e in steps], lw=0.8, color="C0")
    ax.set_xlabel("step")
    ax.set_ylabel("BCE loss", color="C0")
    ax.set_yscale("log")
    if vals:
        per_epoch = max(1, len(steps) // max(len(vals), 1))
        ax2 = ax.twinx()
        ax2.plot([(e["epoch"] + 1) * per_epoch for e in vals], [e["macro_f1"] for e in vals],
                 marker="o", ms=3, color="C1")
        ax2.set_ylabel("val macro F1", color="C1")
        ax2.set_ylim(0, 1.02)
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def ablation_bars(rows: Sequence[tuple[str, float, float, float]], path: str | Path) -> Path:
    """Grouped bars of (architecture, recall, precision, macro F1)."""
    metrics = ("Recall", "Precision", "Macro F1 Score")
    fig, ax = plt.subplots(figsize=(WIDTH, WIDTH / GOLDEN_RATIO))
    width = 0.8 / max(len(rows), 1)
    for i, (name, *vals) in enumerate(rows):
        xs = [j + (i - (len(rows) - 1) / 2) * width for j in range(len(metrics))]
        ax.bar(xs, vals, width=width, label=name)
    ax.set_xticks(range(len(metrics)))
    ax.set_xticklabels(metrics)
    ax.set_ylim(0, 1.05)
    ax.legend(frameon=False, loc="lower right")
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path
