"""Report figures written straight to image files (no interactive backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.figure import Figure

from .evaluation import MeanIoUResult
from .scale_analysis import RatioHistogram, scale_to_area_ratio


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return path


def plot_ratio_histogram(
    hist: RatioHistogram,
    peaks: Sequence[float],
    scales: Sequence[float],
    path: str | Path,
    title: str = "cytoplasm / nucleus area ratio",
) -> Path:
    """Histogram with detected peaks (dashed) and derived crop capacities (red)."""
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    if hist.counts.size:
        ax.bar(hist.centers, hist.counts, width=hist.bin_width, color="0.6", edgecolor="0.4")
    for p in peaks:
        ax.axvline(p, color="0.2", ls="--", lw=1)
    for s in scales:
        ax.axvline(scale_to_area_ratio(s), color="red", lw=1.5)
    ax.set_xlabel("area ratio")
    ax.set_ylabel("instances")
    ax.set_title(title)
    return _save(fig, path)


def plot_loss_history(history: Sequence[float], path: str | Path, title: str = "training loss") -> Path:
    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot()
    ax.plot(np.arange(1, len(history) + 1), history, marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean cross-entropy")
    ax.set_yscale("log")
    ax.set_title(title)
    return _save(fig, path)


def plot_per_image_iou(result: MeanIoUResult, path: str | Path) -> Path:
    ids = sorted(result.per_image)
    fig = Figure(figsize=(max(4, 0.35 * len(ids) + 2), 3.5))
    ax = fig.add_subplot()
    ax.bar(range(len(ids)), [result.per_image[i] for i in ids], color="tab:blue")
    ax.axhline(result.score, color="red", lw=1, label=f"mIoU {result.score:.3f}")
    ax.set_xticks(range(len(ids)))
    ax.set_xticklabels(ids, rotation=60, ha="right", fontsize=7)
    ax.set_ylim(0, 1)
    ax.set_ylabel(f"IoU ({result.variant})")
    ax.legend(loc="lower right")
    return _save(fig, path)
