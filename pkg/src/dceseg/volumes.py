"""Volume types, file I/O and the preprocessing steps applied before training.

Volumes are stored as a raw little-endian buffer (``name.mvf``) plus a JSON
sidecar (``name.mvf.json``) describing dims, axis order, dtype and voxel
spacing. Float series use dtype ``f32`` with axes t,z,y,x; binary masks use
``u8`` with axes z,y,x. The buffer is row-major with x fastest, so a
write/read round trip is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

VOLUME_FORMAT_VERSION = 1

SERIES_AXES = "t,z,y,x"
MASK_AXES = "z,y,x"


class VolumeFormatError(ValueError):
    """Malformed or inconsistent volume file pair."""


def _check_spacing(spacing_mm) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing_mm)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing_mm must be three positive values, got {spacing_mm!r}")
    return spacing


@dataclass
class VolumeSeries:
    """4D intensity volume [T,Z,Y,X] with voxel spacing (x, y, z) in mm."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[0] < 1:
            raise ValueError(f"series must be [T,Z,Y,X] with T >= 1, got {self.data.shape}")
        self.spacing_mm = _check_spacing(self.spacing_mm)

    @property
    def num_phases(self) -> int:
        return self.data.shape[0]


@dataclass
class BinaryMask3D:
    """Binary voxel volume [Z,Y,X] with voxel spacing (x, y, z) in mm."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"mask must be [Z,Y,X], got shape {arr.shape}")
        if not (((arr == 0) | (arr == 1)).all()):
            raise ValueError("mask values must be 0 or 1")
        self.data = arr.astype(np.uint8)
        self.spacing_mm = _check_spacing(self.spacing_mm)

    @property
    def num_foreground(self) -> int:
        return int(self.data.sum())


# ---------------------------------------------------------------------------
# file I/O


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_volume(volume: VolumeSeries | BinaryMask3D, path) -> None:
    """Write the raw buffer and its JSON sidecar (lossless round trip)."""
    path = Path(path)
    if isinstance(volume, VolumeSeries):
        dtype_tag, axes = "f32", SERIES_AXES
        buffer = volume.data.astype("<f4", copy=False)
    elif isinstance(volume, BinaryMask3D):
        dtype_tag, axes = "u8", MASK_AXES
        buffer = volume.data
    else:
        raise TypeError(f"cannot write object of type {type(volume).__name__}")
    header = {
        "format_version": VOLUME_FORMAT_VERSION,
        "dims": list(volume.data.shape),
        "axis_order": axes,
        "dtype": dtype_tag,
        "layout": "row-major",
        "spacing_mm": list(volume.spacing_mm),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buffer.tobytes())
    _sidecar_path(path).write_text(json.dumps(header, indent=2) + "\n")


def read_volume(path) -> VolumeSeries | BinaryMask3D:
    """Read a volume file pair; the sidecar decides series vs mask."""
    path = Path(path)
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise VolumeFormatError(f"missing sidecar {sidecar}")
    if not path.exists():
        raise VolumeFormatError(f"missing raw file {path}")
    header = json.loads(sidecar.read_text())
    try:
        dims = tuple(int(d) for d in header["dims"])
        dtype_tag = header["dtype"]
        spacing = _check_spacing(header["spacing_mm"])
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"malformed sidecar {sidecar}: {exc}") from exc
    if dtype_tag == "f32":
        np_dtype, itemsize = np.dtype("<f4"), 4
    elif dtype_tag == "u8":
        np_dtype, itemsize = np.dtype("u1"), 1
    else:
        raise VolumeFormatError(f"unknown dtype {dtype_tag!r} in {sidecar}")
    expected = int(np.prod(dims)) * itemsize
    raw = path.read_bytes()
    if len(raw) != expected:
        raise VolumeFormatError(
            f"{path}: expected {expected} bytes for dims {dims}, found {len(raw)}")
    data = np.frombuffer(raw, dtype=np_dtype).reshape(dims)
    if dtype_tag == "f32":
        if len(dims) != 4:
            raise VolumeFormatError(f"{path}: series must have 4 dims, got {dims}")
        return VolumeSeries(data.copy(), spacing)
    if len(dims) != 3:
        raise VolumeFormatError(f"{path}: mask must have 3 dims, got {dims}")
    if not (((data == 0) | (data == 1)).all()):
        raise VolumeFormatError(f"{path}: mask values must be 0 or 1")
    return BinaryMask3D(data.copy(), spacing)


# ---------------------------------------------------------------------------
# breath-hold averaging


@dataclass(frozen=True)
class BreathHoldGrouping:
    """Ordered contiguous index ranges [start, stop) covering all acquisitions."""

    ranges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.ranges:
            raise ValueError("grouping must contain at least one range")
        cursor = 0
        for start, stop in self.ranges:
            if start != cursor or stop <= start:
                raise ValueError(
                    f"ranges must be non-empty, contiguous and ordered; got {self.ranges}")
            cursor = stop
        object.__setattr__(self, "total", cursor)

    @classmethod
    def from_lengths(cls, lengths: Sequence[int]) -> "BreathHoldGrouping":
        ranges, cursor = [], 0
        for n in lengths:
            ranges.append((cursor, cursor + n))
            cursor += n
        return cls(tuple(ranges))


def average_breath_holds(series: VolumeSeries, grouping: BreathHoldGrouping) -> VolumeSeries:
    """Collapse the time axis to one mean volume per breath hold."""
    if grouping.total != series.num_phases:
        raise ValueError(
            f"grouping covers {grouping.total} acquisitions, series has {series.num_phases}")
    phases = [series.data[start:stop].mean(axis=0) for start, stop in grouping.ranges]
    return VolumeSeries(np.stack(phases, axis=0), series.spacing_mm)


# ---------------------------------------------------------------------------
# intensity normalization


@dataclass
class NormalizationParams:
    """Percentile clipping plus zero-mean unit-variance rescaling.

    The upper percentile is computed over all voxels of the 4D series with
    linear interpolation; values above it are clipped to it, and the mean and
    population std of the clipped series are recorded for provenance.
    """

    lower_percentile: float = 0.0
    upper_percentile: float = 99.8
    clip_value: float | None = None
    mean: float | None = None
    std: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.lower_percentile < self.upper_percentile <= 100.0):
            raise ValueError(
                f"percentiles must satisfy 0 <= lower < upper <= 100, got "
                f"{self.lower_percentile}/{self.upper_percentile}")


def normalize(series: VolumeSeries,
              params: NormalizationParams | None = None,
              ) -> tuple[VolumeSeries, NormalizationParams]:
    """Clip above the upper percentile, then standardize the whole series.

    Statistics are pooled over all phases so the relative enhancement between
    phases is preserved. Raises on a constant series (zero variance).
    """
    if params is None:
        params = NormalizationParams()
    data = series.data.astype(np.float64)
    clip = float(np.percentile(data, params.upper_percentile))
    clipped = np.minimum(data, clip)
    mean = float(clipped.mean())
    std = float(clipped.std())
    if std == 0.0:
        raise ValueError("cannot normalize a constant series (zero variance)")
    out = ((clipped - mean) / std).astype(np.float32)
    fitted = NormalizationParams(params.lower_percentile, params.upper_percentile,
                                 clip_value=clip, mean=mean, std=std)
    return VolumeSeries(out, series.spacing_mm), fitted


# ---------------------------------------------------------------------------
# slicing and dataset splits


@dataclass
class SliceSample:
    """One axial training slice: phase stack [P,Y,X] plus its binary mask."""

    case_id: str
    z: int
    image: np.ndarray
    mask: np.ndarray


def extract_slices(series: VolumeSeries, mask: BinaryMask3D,
                   case_id: str = "") -> list[SliceSample]:
    """Split a series/mask pair into per-slice samples, preserving z order."""
    if series.data.shape[1:] != mask.data.shape:
        raise ValueError(
            f"series {series.data.shape[1:]} and mask {mask.data.shape} dims differ")
    return [
        SliceSample(case_id, z,
                    np.ascontiguousarray(series.data[:, z]),
                    np.ascontiguousarray(mask.data[z]))
        for z in range(mask.data.shape[0])
    ]


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list


def split_dataset(cases: Sequence, seed: int,
                  counts: tuple[int, int, int]) -> DatasetSplit:
    """Deterministic random partition into train/validation/test sets."""
    n_train, n_val, n_test = counts
    if min(counts) < 0 or n_train + n_val + n_test != len(cases):
        raise ValueError(
            f"split counts {counts} do not partition {len(cases)} cases")
    order = np.random.default_rng(seed).permutation(len(cases))
    shuffled = [cases[i] for i in order]
    return DatasetSplit(
        train=shuffled[:n_train],
        validation=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
    )
