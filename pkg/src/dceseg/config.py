"""Experiment configuration file and run manifests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

from .checkpoint import FORMAT_VERSION as CHECKPOINT_FORMAT_VERSION
from .volumes import VOLUME_FORMAT_VERSION

ARCHITECTURE_NAMES = ("dilated_fcn", "unet")
INPUT_CONFIG_LABELS = ("I", "II", "III")


@dataclass
class ExperimentConfig:
    """Training configuration, stored as a flat JSON object.

    The paper-scale run is the default (500,000 iterations, full widths);
    desk-scale runs override ``iterations`` and ``width_divisor`` explicitly.
    """

    architecture: str
    input_config: str
    data_dir: str
    output_dir: str
    phase_index: int = 2
    iterations: int = 500_000
    learning_rate: float = 0.001
    seed: int = 0
    checkpoint_every: int = 0
    width_divisor: int = 1
    resume_from: str | None = None

    def __post_init__(self):
        if self.architecture not in ARCHITECTURE_NAMES:
            raise ValueError(
                f"invalid architecture {self.architecture!r}; valid options: "
                + ", ".join(ARCHITECTURE_NAMES))
        if self.input_config not in INPUT_CONFIG_LABELS:
            raise ValueError(
                f"invalid input_config {self.input_config!r}; valid options: "
                + ", ".join(INPUT_CONFIG_LABELS))
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.width_divisor < 1 or 16 % self.width_divisor or 32 % self.width_divisor:
            raise ValueError(
                f"width_divisor {self.width_divisor} must divide the stated widths")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if not (0 <= self.phase_index < 6):
            raise ValueError(f"phase_index {self.phase_index} out of range")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        raw = json.loads(Path(path).read_text())
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        missing = {"architecture", "input_config", "data_dir", "output_dir"} - set(raw)
        if missing:
            raise ValueError(f"config is missing keys: {', '.join(sorted(missing))}")
        return cls(**raw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


def sha256_digest(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(directory, command: str, seed: int | None,
                   outputs: list[Path], config: dict | None = None) -> Path:
    """Record what a command produced: config snapshot, format versions,
    seed, timestamp, and one digest per emitted file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "seed": seed,
        "config": config,
        "format_versions": {
            "volume": VOLUME_FORMAT_VERSION,
            "checkpoint": CHECKPOINT_FORMAT_VERSION,
        },
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "outputs": [
            {"path": str(Path(p).relative_to(directory)) if Path(p).is_relative_to(directory)
             else str(p),
             "sha256": sha256_digest(Path(p))}
            for p in outputs
        ],
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path
