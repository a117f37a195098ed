"""
Static SVG charts: threshold sweep lines, per-class AP bars and stacked
supervision-distribution bars. Output bytes depend only on the data.
"""

import logging
from typing import Dict, Mapping, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger(__name__)

STYLE = {
    "svg.hashsalt": "dpke",
    "svg.fonttype": "path",
    "font.size": 9,
    "figure.figsize": (6.0, 3.6),
    "axes.grid": True,
    "grid.alpha": 0.3,
}

BUCKET_LABELS = ("strong", "weak", "below threshold", "invalid")


def _save(fig, path: str):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info("wrote %s", path)


def threshold_sweep(path: str,
                    curves: Mapping[str, Sequence[Tuple[float, Tuple[float, float]]]]):
    """mAP@0.25 against the filter threshold, one line per method.

    ``curves`` maps a label to ``(threshold, (mean, std))`` points; error bars
    are one standard deviation.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ticks = set()
        for label, points in curves.items():
            points = sorted(points)
            xs = [tau for tau, _ in points]
            ax.errorbar(xs, [m for _, (m, _) in points], yerr=[s for _, (_, s) in points],
                        marker="o", capsize=3, label=label)
            ticks.update(xs)
        ax.set_xlabel("objectness threshold")
        ax.set_ylabel("mAP@0.25")
        ax.set_xticks(sorted(ticks))
        ax.legend()
        _save(fig, path)


def per_class_ap(path: str, class_names: Sequence[str], runs: Mapping[str, Sequence[float]]):
    """Grouped bars, one group per class and one bar per run."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.arange(len(class_names))
        width = 0.8 / max(1, len(runs))
        for i, (label, values) in enumerate(runs.items()):
            ax.bar(x + (i - (len(runs) - 1) / 2) * width, values, width, label=label)
        ax.set_xticks(x)
        ax.set_xticklabels(class_names, rotation=30, ha="right")
        ax.set_ylabel("AP@0.25")
        ax.set_ylim(0, 1)
        ax.legend()
        _save(fig, path)


def supervision_distribution(path: str, rows: Dict[str, Sequence[float]]):
    """Stacked bars of the four supervision buckets for each labelled row."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        labels = list(rows)
        bottom = np.zeros(len(labels))
        for b, name in enumerate(BUCKET_LABELS):
            values = np.array([rows[label][b] for label in labels])
            ax.bar(labels, values, bottom=bottom, label=name)
            bottom += values
        ax.set_ylabel("fraction of teacher detections")
        ax.set_ylim(0, 1)
        ax.legend(fontsize=7)
        _save(fig, path)
