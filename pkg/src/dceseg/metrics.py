"""Segmentation metrics: Dice overlap and the 95th-percentile Hausdorff
distance, plus the median/IQR summary used for reporting."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .volumes import BinaryMask3D


def dsc(x: BinaryMask3D, y: BinaryMask3D) -> float:
    """Dice similarity coefficient 2|X n Y| / (|X| + |Y|) on binary masks."""
    if x.data.shape != y.data.shape:
        raise ValueError(f"mask dims differ: {x.data.shape} vs {y.data.shape}")
    nx = x.num_foreground
    ny = y.num_foreground
    if nx == 0 and ny == 0:
        raise ValueError("dsc undefined for two empty masks")
    intersection = int(np.count_nonzero(x.data & y.data))
    return 2.0 * intersection / (nx + ny)


def boundary_points_mm(mask: BinaryMask3D) -> np.ndarray:
    """Physical coordinates of boundary voxels (foreground with a background
    face neighbor, counting outside the volume as background)."""
    fg = mask.data.astype(bool)
    interior = fg.copy()
    for axis in range(3):
        for shift in (1, -1):
            neighbor = np.zeros_like(fg)
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if shift == 1:
                src[axis], dst[axis] = slice(1, None), slice(None, -1)
            else:
                src[axis], dst[axis] = slice(None, -1), slice(1, None)
            neighbor[tuple(dst)] = fg[tuple(src)]
            interior &= neighbor
    boundary = fg & ~interior
    idx = np.argwhere(boundary)
    sx, sy, sz = mask.spacing_mm
    return idx.astype(np.float64) * np.array([sz, sy, sx])


def _directed_h95(points_a: np.ndarray, tree_b: cKDTree) -> float:
    dists, _ = tree_b.query(points_a, k=1)
    dists.sort()
    rank = int(np.ceil(0.95 * len(dists)))  # nearest-rank percentile, 1-based
    return float(dists[rank - 1])


def hd95(x: BinaryMask3D, y: BinaryMask3D) -> float:
    """95th-percentile Hausdorff distance in mm between two masks.

    Point sets are the boundary voxels (voxel centers scaled by spacing);
    each direction takes the nearest-rank 95th percentile of the sorted
    nearest-neighbor distances, and the result is the larger direction.
    """
    if x.data.shape != y.data.shape:
        raise ValueError(f"mask dims differ: {x.data.shape} vs {y.data.shape}")
    if x.spacing_mm != y.spacing_mm:
        raise ValueError(f"mask spacings differ: {x.spacing_mm} vs {y.spacing_mm}")
    if x.num_foreground == 0 or y.num_foreground == 0:
        raise ValueError("hd95 undefined for an empty mask")
    pts_x = boundary_points_mm(x)
    pts_y = boundary_points_mm(y)
    tree_x = cKDTree(pts_x)
    tree_y = cKDTree(pts_y)
    return max(_directed_h95(pts_x, tree_y), _directed_h95(pts_y, tree_x))


def summarize(values: Sequence[float]) -> tuple[float, float, float]:
    """(median, Q1, Q3) with linear interpolation between order statistics."""
    data = np.asarray(values, dtype=np.float64)
    if data.size == 0:
        raise ValueError("summarize requires at least one value")
    median, q1, q3 = np.percentile(data, [50.0, 25.0, 75.0])
    return float(median), float(q1), float(q3)


# ---------------------------------------------------------------------------
# per-case report


CSV_HEADER = ("case", "dsc", "hd95_mm")


@dataclass
class MetricsReport:
    """Per-case rows of (case id, dice, hd95 in mm)."""

    rows: list[tuple[str, float, float]]

    def __post_init__(self):
        seen = set()
        for case, value_dsc, value_hd in self.rows:
            if case in seen:
                raise ValueError(f"duplicate case id {case!r}")
            seen.add(case)
            if not (np.isfinite(value_dsc) and np.isfinite(value_hd)):
                raise ValueError(f"non-finite metrics for case {case!r}")

    def cases(self) -> list[str]:
        return [case for case, _, _ in self.rows]

    def values(self, metric: str) -> list[float]:
        index = {"dsc": 1, "hd95": 2}[metric]
        return [row[index] for row in self.rows]

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(CSV_HEADER)
            for case, value_dsc, value_hd in self.rows:
                writer.writerow([case, repr(value_dsc), repr(value_hd)])

    @classmethod
    def read_csv(cls, path) -> "MetricsReport":
        with Path(path).open(newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            header = tuple(next(reader, ()))
            if header != CSV_HEADER:
                raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
            rows = [(case, float(d), float(h)) for case, d, h in reader]
        return cls(rows)
