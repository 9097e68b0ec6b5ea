"""Scatter plots of image quality metrics against degradation scores."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import METRIC_NAMES

SCORES = (("tilt_score", "tilt"), ("blur_score", "blur"))


def axis_limits(values: np.ndarray, margin: float = 0.05) -> tuple[float, float]:
    lo, hi = float(np.min(values)), float(np.max(values))
    span = hi - lo if hi > lo else max(abs(hi), 1.0)
    return lo - margin * span, hi + margin * span


def plot_metrics(records: Sequence[dict], out_dir: str | Path, prefix: str = "metrics") -> list[Path]:
    """Write one figure per degradation score with a panel per metric.

    Returns the written paths (``<prefix>_vs_tilt.png`` and
    ``<prefix>_vs_blur.png``).

    Raises
    ------
    ValueError
        If ``records`` is empty or lacks a score or metric column.
    """
    if not records:
        raise ValueError("report is empty")
    metrics = [m for m in METRIC_NAMES if all(m in r for r in records)]
    if not metrics:
        raise ValueError("report has no metric columns")
    for key, _ in SCORES:
        if not all(key in r for r in records):
            raise ValueError(f"report records lack {key!r}")

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for key, label in SCORES:
        fig = metric_figure(records, key, label, metrics)
        path = out_dir / f"{prefix}_vs_{label}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written


def metric_figure(records: Sequence[dict], key: str, label: str, metrics: Sequence[str]):
    """One row of scatter panels, ``metric`` against ``records[i][key]``."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x = np.array([r[key] for r in records], dtype=float)
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.5), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        y = np.array([r[metric] for r in records], dtype=float)
        ax.scatter(x, y, s=6, alpha=0.6, label=metric)
        ax.set_xlim(*axis_limits(x))
        ax.set_ylim(*axis_limits(y))
        ax.set_xlabel(f"{label} score")
        ax.set_ylabel(metric)
        ax.legend(loc="best", fontsize="small")
    fig.tight_layout()
    return fig
