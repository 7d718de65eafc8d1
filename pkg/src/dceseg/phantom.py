"""Synthetic dynamic-contrast phantom with known ground-truth liver masks.

A phantom is a list of geometric regions painted onto a background, each with
its own time-intensity curve over the six contrast phases; later regions
overwrite earlier ones. The liver mask is the union of the liver and lesion
regions (lesions are labelled as liver, matching the annotation convention),
and is independent of the additive Gaussian noise.

Two presets support the input-configuration comparison at desk scale:

* ``default_separable_spec`` - the liver is uniquely bright in the late
  arterial phase, so even a single-phase observer can find it;
* ``default_ambiguity_spec`` - a confuser organ touching the liver has
  exactly the liver's late-arterial intensity and differs in every other
  phase, so only a multi-phase observer can tell them apart.

Preset geometry is jittered per seed, which keeps shape and position from
being a reliable cue across generated cases.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volumes import BinaryMask3D, VolumeSeries

NUM_PHASES = 6
DEFAULT_SPACING_MM = (1.543, 1.543, 2.0)
MASK_TISSUES = frozenset({"liver", "lesion"})

LIVER_CURVE = (30.0, 35.0, 95.0, 80.0, 70.0, 60.0)
AMBIGUOUS_CONFUSER_CURVE = (30.0, 95.0, 95.0, 40.0, 35.0, 30.0)
SEPARABLE_CONFUSER_CURVE = (30.0, 95.0, 55.0, 40.0, 35.0, 30.0)
LESION_CURVE = (30.0, 32.0, 45.0, 42.0, 40.0, 38.0)
BACKGROUND_CURVE = (25.0, 26.0, 27.0, 27.0, 26.0, 25.0)


@dataclass(frozen=True)
class TimeIntensityCurve:
    """Per-phase intensity of one tissue, arbitrary units."""

    values: tuple[float, ...]

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if len(values) != NUM_PHASES:
            raise ValueError(f"curve must have {NUM_PHASES} values, got {len(values)}")
        if not all(np.isfinite(values)):
            raise ValueError("curve values must be finite")
        object.__setattr__(self, "values", values)

    def __getitem__(self, phase: int) -> float:
        return self.values[phase]


@dataclass(frozen=True)
class Region:
    """Ellipsoid or box region in voxel coordinates (z, y, x)."""

    shape: str
    tissue: str
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    curve: TimeIntensityCurve

    def __post_init__(self):
        if self.shape not in ("ellipsoid", "box"):
            raise ValueError(f"unknown region shape {self.shape!r}")
        if any(r <= 0 for r in self.radii):
            raise ValueError("region radii must be positive")

    def rasterize(self, dims: tuple[int, int, int]) -> np.ndarray:
        zz, yy, xx = np.ogrid[: dims[0], : dims[1], : dims[2]]
        dz = (zz - self.center[0]) / self.radii[0]
        dy = (yy - self.center[1]) / self.radii[1]
        dx = (xx - self.center[2]) / self.radii[2]
        if self.shape == "ellipsoid":
            return dz * dz + dy * dy + dx * dx <= 1.0
        return (np.abs(dz) <= 1.0) & (np.abs(dy) <= 1.0) & (np.abs(dx) <= 1.0)


@dataclass
class PhantomSpec:
    """Grid, tissue regions, noise level and seed of one synthetic case."""

    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float] = DEFAULT_SPACING_MM
    background: TimeIntensityCurve = field(
        default_factory=lambda: TimeIntensityCurve(BACKGROUND_CURVE))
    regions: list[Region] = field(default_factory=list)
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be three positive extents, got {self.dims}")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")
        if not any(r.tissue == "liver" for r in self.regions):
            raise ValueError("phantom spec must contain a liver region")
        for region in self.regions:
            for c, r, d in zip(region.center, region.radii, self.dims):
                if c - r < -0.5 or c + r > d - 0.5:
                    raise ValueError(
                        f"region {region.tissue!r} extends outside the grid {self.dims}")

    # -- serialization (same JSON family as the CLI config) ------------------

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing_mm": list(self.spacing_mm),
            "background": list(self.background.values),
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "regions": [
                {
                    "shape": r.shape,
                    "tissue": r.tissue,
                    "center": list(r.center),
                    "radii": list(r.radii),
                    "curve": list(r.curve.values),
                }
                for r in self.regions
            ],
        }

    @classmethod
    def from_dict(cls, spec: dict) -> "PhantomSpec":
        regions = [
            Region(
                shape=r["shape"],
                tissue=r["tissue"],
                center=tuple(float(v) for v in r["center"]),
                radii=tuple(float(v) for v in r["radii"]),
                curve=TimeIntensityCurve(tuple(r["curve"])),
            )
            for r in spec.get("regions", [])
        ]
        return cls(
            dims=tuple(spec["dims"]),
            spacing_mm=tuple(spec.get("spacing_mm", DEFAULT_SPACING_MM)),
            background=TimeIntensityCurve(tuple(spec.get("background", BACKGROUND_CURVE))),
            regions=regions,
            noise_sigma=float(spec.get("noise_sigma", 0.0)),
            seed=int(spec.get("seed", 0)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "PhantomSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def generate_phantom(spec: PhantomSpec) -> tuple[VolumeSeries, BinaryMask3D]:
    """Render the spec to a six-phase series and its liver mask.

    Voxel value = tissue curve at the phase + Gaussian noise; later regions
    overwrite earlier ones. Deterministic for a given spec (seed included).
    """
    region_masks = [r.rasterize(spec.dims) for r in spec.regions]
    rng = np.random.default_rng(spec.seed)
    phases = np.empty((NUM_PHASES,) + spec.dims, dtype=np.float32)
    for phase in range(NUM_PHASES):
        values = np.full(spec.dims, spec.background[phase], dtype=np.float32)
        for region, voxels in zip(spec.regions, region_masks):
            values[voxels] = region.curve[phase]
        if spec.noise_sigma > 0:
            values += rng.normal(0.0, spec.noise_sigma, size=spec.dims).astype(np.float32)
        phases[phase] = values
    mask = np.zeros(spec.dims, dtype=np.uint8)
    for region, voxels in zip(spec.regions, region_masks):
        if region.tissue in MASK_TISSUES:
            mask[voxels] = 1
    return VolumeSeries(phases, spec.spacing_mm), BinaryMask3D(mask, spec.spacing_mm)


# ---------------------------------------------------------------------------
# preset specs


def _jitter(rng: np.random.Generator, value: float, relative: float) -> float:
    return value * (1.0 + rng.uniform(-relative, relative))


def _check_size(size: int) -> tuple[int, int, int]:
    if size % 8:
        raise ValueError(f"phantom size must be divisible by 8, got {size}")
    return size // 4, size, size


def default_separable_spec(size: int, seed: int = 0,
                           noise_sigma: float = 4.0) -> PhantomSpec:
    """Liver uniquely bright in the late arterial phase (index 2).

    One dominant liver (10-40% of the grid) next to a smaller organ whose
    late-arterial intensity differs, plus a hypo-intense lesion inside the
    liver. Geometry is jittered per seed.
    """
    nz, ny, nx = _check_size(size)
    rng = np.random.default_rng(seed)

    def point(fz, fy, fx, wiggle=0.02):
        return (nz * (fz + rng.uniform(-wiggle, wiggle)),
                ny * (fy + rng.uniform(-wiggle, wiggle)),
                nx * (fx + rng.uniform(-wiggle, wiggle)))

    def extent(fz, fy, fx, wiggle=0.08):
        return (_jitter(rng, nz * fz, wiggle),
                _jitter(rng, ny * fy, wiggle),
                _jitter(rng, nx * fx, wiggle))

    liver_center = point(0.50, 0.42, 0.42)
    liver_radii = extent(0.40, 0.34, 0.36)
    lesion_center = (liver_center[0],
                     liver_center[1] + 0.04 * ny,
                     liver_center[2] - 0.05 * nx)
    lesion_radii = (0.10 * nz, 0.08 * ny, 0.08 * nx)
    regions = [
        Region("ellipsoid", "confuser", point(0.50, 0.68, 0.71),
               extent(0.38, 0.24, 0.22),
               TimeIntensityCurve(SEPARABLE_CONFUSER_CURVE)),
        Region("ellipsoid", "liver", liver_center, liver_radii,
               TimeIntensityCurve(LIVER_CURVE)),
        Region("ellipsoid", "lesion", lesion_center, lesion_radii,
               TimeIntensityCurve(LESION_CURVE)),
    ]
    return PhantomSpec(dims=(nz, ny, nx), regions=regions,
                       noise_sigma=noise_sigma, seed=seed)


def default_ambiguity_spec(size: int, seed: int = 0,
                           noise_sigma: float = 4.0) -> PhantomSpec:
    """Liver and confuser organ share the late-arterial intensity exactly.

    Twin construction: the two organs are drawn from the same size
    distribution, sit at a random orientation around the grid center,
    overlap slightly (so they stay one connected bright blob at the shared
    phase) and each contains one hypo-intense lesion with the same curve.
    Only the enhancement curves over the other phases tell them apart.
    """
    nz, ny, nx = _check_size(size)
    rng = np.random.default_rng(seed)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    offset = np.array([0.20 * ny * np.sin(angle), 0.20 * nx * np.cos(angle)])

    def organ(sign):
        center = (nz * (0.50 + rng.uniform(-0.01, 0.01)),
                  ny * 0.5 + sign * offset[0] + rng.uniform(-0.01, 0.01) * ny,
                  nx * 0.5 + sign * offset[1] + rng.uniform(-0.01, 0.01) * nx)
        radii = (_jitter(rng, 0.38 * nz, 0.05),
                 _jitter(rng, 0.23 * ny, 0.05),
                 _jitter(rng, 0.23 * nx, 0.05))
        lesion_center = (center[0] + rng.uniform(-0.01, 0.01) * nz,
                         center[1] + rng.uniform(-0.005, 0.005) * ny,
                         center[2] + rng.uniform(-0.005, 0.005) * nx)
        lesion_radii = (0.13 * nz, 0.07 * ny, 0.07 * nx)
        return center, radii, lesion_center, lesion_radii

    liver = organ(+1)
    confuser = organ(-1)
    regions = [
        Region("ellipsoid", "confuser", confuser[0], confuser[1],
               TimeIntensityCurve(AMBIGUOUS_CONFUSER_CURVE)),
        Region("ellipsoid", "liver", liver[0], liver[1],
               TimeIntensityCurve(LIVER_CURVE)),
        Region("ellipsoid", "confuser_lesion", confuser[2], confuser[3],
               TimeIntensityCurve(LESION_CURVE)),
        Region("ellipsoid", "lesion", liver[2], liver[3],
               TimeIntensityCurve(LESION_CURVE)),
    ]
    return PhantomSpec(dims=(nz, ny, nx), regions=regions,
                       noise_sigma=noise_sigma, seed=seed)
