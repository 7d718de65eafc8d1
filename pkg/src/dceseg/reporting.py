"""Box-plot report for per-case metrics.

One box per metrics file for each of the two metrics (Dice and HD95), with
the usual Tukey convention: box at the quartiles, whiskers at the most
extreme data points within 1.5 IQR of the box, everything beyond drawn as
outlier dots. The figure is written to the requested path (SVG by default)
and the numbers behind every box go to a CSV next to it, so the plot is
reproducible and checkable without parsing the graphics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .metrics import MetricsReport, summarize  # noqa: E402

SUMMARY_HEADER = ("source", "metric", "n", "median", "q1", "q3",
                  "whisker_low", "whisker_high", "n_outliers")


@dataclass(frozen=True)
class BoxStats:
    source: str
    metric: str
    n: int
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: tuple[float, ...]


def box_stats(values: Sequence[float], source: str, metric: str) -> BoxStats:
    median, q1, q3 = summarize(values)
    iqr = q3 - q1
    low_fence = q1 - 1.5 * iqr
    high_fence = q3 + 1.5 * iqr
    inside = [v for v in values if low_fence <= v <= high_fence]
    outliers = tuple(v for v in values if v < low_fence or v > high_fence)
    return BoxStats(source=source, metric=metric, n=len(values), median=median,
                    q1=q1, q3=q3, whisker_low=min(inside), whisker_high=max(inside),
                    outliers=outliers)


def summary_csv_path(figure_path) -> Path:
    figure_path = Path(figure_path)
    return figure_path.with_name(figure_path.stem + "_summary.csv")


def write_report(metrics_paths: Sequence, out_path) -> list[Path]:
    """Render the boxplot figure and its summary CSV; returns both paths."""
    out_path = Path(out_path)
    reports = [(Path(p).stem, MetricsReport.read_csv(p)) for p in metrics_paths]
    if not reports:
        raise ValueError("report needs at least one metrics file")

    stats: list[BoxStats] = []
    fig, axes = plt.subplots(1, 2, figsize=(2.0 + 1.2 * len(reports) * 2, 4.0))
    for ax, metric, label in zip(axes, ("dsc", "hd95"),
                                 ("Dice similarity coefficient", "HD95 (mm)")):
        series = [report.values(metric) for _, report in reports]
        ax.boxplot(series, whis=1.5, tick_labels=[name for name, _ in reports])
        ax.set_title(label)
        ax.grid(axis="y", alpha=0.3)
        ax.tick_params(axis="x", rotation=30)
        for (name, _), values in zip(reports, series):
            stats.append(box_stats(values, name, metric))
    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path)
    plt.close(fig)

    csv_path = summary_csv_path(out_path)
    with csv_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(SUMMARY_HEADER)
        for s in stats:
            writer.writerow([s.source, s.metric, s.n, repr(s.median), repr(s.q1),
                             repr(s.q3), repr(s.whisker_low), repr(s.whisker_high),
                             len(s.outliers)])
    return [out_path, csv_path]
