"""On-disk sweep recordings.

A recording directory holds::

    manifest.yaml        calibration, phantom id, kind, acquisition parameters
    frames/000001.pgm    one 8-bit binary graymap (P5) per frame
    log.csv              timestamp, force and the 12 pose numbers per frame

Rows of ``log.csv`` are matched to frame files by index; nothing is
interpolated or re-timed on load.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Union

import cv2
import numpy as np

from uscomp.calibration import CalibrationParams, Pose
from uscomp.exceptions import (
    DimensionMismatchError,
    MissingFileError,
    NegativeForceError,
    RecordingError,
    TimestampOrderError,
    ValidationError,
)
from uscomp.serializable import Serializable, load_yaml, register_serializable, save_yaml

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.yaml"
LOG_NAME = "log.csv"
FRAMES_DIR = "frames"
LOG_HEADER = ["timestamp", "force"] + [f"r{i}{j}" for i in range(3) for j in range(3)] + [
    "tx",
    "ty",
    "tz",
]
RECORDING_KINDS = ("palpation", "sweep")
PALPATION_DRIFT_MM = 0.5


@dataclass
class Frame:
    """One synchronized (image, force, pose) sample."""

    image: np.ndarray
    force: float
    pose: Pose
    timestamp: float

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.force = float(self.force)
        self.timestamp = float(self.timestamp)
        if self.image.ndim != 2:
            raise ValidationError("Frame image must be two-dimensional")
        if self.image.dtype != np.uint8:
            if self.image.min() < 0 or self.image.max() > 255:
                raise ValidationError("Frame intensity outside [0, 255]")
            self.image = self.image.astype(np.uint8)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Frame)
            and self.force == other.force
            and self.timestamp == other.timestamp
            and self.pose == other.pose
            and np.array_equal(self.image, other.image)
        )


@register_serializable
class RecordingManifest(Serializable):
    """Header of a recording."""

    def __init__(
        self,
        calibration: CalibrationParams = None,
        phantom_id: str = "",
        kind: str = "sweep",
        acquisition: Dict[str, Any] = None,
        frame_count: int = 0,
    ):
        super().__init__()
        self.calibration = calibration if calibration is not None else CalibrationParams()
        self.phantom_id = phantom_id
        self.kind = kind
        self.acquisition = dict(acquisition or {})
        self.frame_count = int(frame_count)
        self.add_serializable_fields(
            ["calibration", "phantom_id", "kind", "acquisition", "frame_count"]
        )

    def validate(self) -> None:
        if self.kind not in RECORDING_KINDS:
            raise ValidationError(f"Unknown recording kind '{self.kind}'", self)


@dataclass
class SweepRecording:
    """Time-synchronized frames plus their manifest."""

    manifest: RecordingManifest
    frames: List[Frame] = field(default_factory=list)

    @property
    def calibration(self) -> CalibrationParams:
        return self.manifest.calibration

    @property
    def kind(self) -> str:
        return self.manifest.kind

    @property
    def forces(self) -> np.ndarray:
        return np.array([f.force for f in self.frames])

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])

    @property
    def poses(self) -> List[Pose]:
        return [f.pose for f in self.frames]

    @property
    def translations(self) -> np.ndarray:
        return np.array([f.pose.translation for f in self.frames])

    def images(self) -> np.ndarray:
        return np.stack([f.image for f in self.frames])

    def __len__(self) -> int:
        return len(self.frames)

    def validate(self, path: str = None) -> None:
        """Check every recording invariant.

        Raises:
            RecordingError: On structural problems (frame count, dimensions, order, force).
            ValidationError: On invalid manifest or poses.
        """
        self.manifest.validate()
        if len(self.frames) < 2:
            raise RecordingError("A recording needs at least 2 frames", path)
        expected = self.calibration.shape
        previous = None
        for index, frame in enumerate(self.frames):
            if frame.image.shape != expected:
                raise DimensionMismatchError(expected, frame.image.shape, path)
            if previous is not None and not frame.timestamp > previous:
                raise TimestampOrderError(index, previous, frame.timestamp, path)
            if frame.force < 0 or not np.isfinite(frame.force):
                raise NegativeForceError(index, frame.force, path)
            frame.pose.validate()
            previous = frame.timestamp
        if self.kind == "palpation":
            direction = self.frames[0].pose.force_direction
            offsets = self.translations - self.translations[0]
            lateral = offsets - np.outer(offsets @ direction, direction)
            drift = float(np.max(np.linalg.norm(lateral, axis=1)))
            if drift > PALPATION_DRIFT_MM:
                raise ValidationError(f"Palpation probe drifts {drift:.3f} mm off its axis")

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SweepRecording)
            and self.manifest.serialize() == other.manifest.serialize()
            and len(self.frames) == len(other.frames)
            and all(a == b for a, b in zip(self.frames, other.frames))
        )


def frame_filename(index: int) -> str:
    return f"{index + 1:06d}.pgm"


def write_sweep(rec: SweepRecording, path: Union[str, Path]) -> Path:
    """Write a recording directory.

    Raises:
        RecordingError / ValidationError: If the recording is invalid.
        OSError: On I/O failures.
    """
    path = Path(path)
    rec.validate(str(path))
    rec.manifest.frame_count = len(rec.frames)
    frames_dir = path / FRAMES_DIR
    frames_dir.mkdir(parents=True, exist_ok=True)
    save_yaml(rec.manifest, path / MANIFEST_NAME)
    for index, frame in enumerate(rec.frames):
        target = frames_dir / frame_filename(index)
        if not cv2.imwrite(str(target), frame.image):
            raise OSError(f"Could not write frame {target}")
    with open(path / LOG_NAME, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(LOG_HEADER)
        for frame in rec.frames:
            values = [frame.timestamp, frame.force] + frame.pose.to_row().tolist()
            writer.writerow([repr(float(v)) for v in values])
    logger.debug("Wrote %d frames to %s", len(rec.frames), path)
    return path


def _read_log(log_path: Path) -> List[List[float]]:
    with open(log_path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != LOG_HEADER:
            raise RecordingError("Unexpected log header", str(log_path))
        try:
            return [[float(v) for v in row] for row in reader if row]
        except ValueError as e:
            raise RecordingError(f"Malformed log row: {e}", str(log_path)) from e


def read_sweep(path: Union[str, Path]) -> SweepRecording:
    """Load and validate a recording directory.

    Raises:
        MissingFileError: If the manifest, log or a frame file is missing.
        DimensionMismatchError, TimestampOrderError, NegativeForceError: On invalid content.
    """
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    log_path = path / LOG_NAME
    for required in (manifest_path, log_path):
        if not required.is_file():
            raise MissingFileError("Missing recording file", str(required))
    manifest = load_yaml(manifest_path, expected=RecordingManifest)
    rows = _read_log(log_path)
    if manifest.frame_count and manifest.frame_count != len(rows):
        raise RecordingError(
            f"Manifest declares {manifest.frame_count} frames, log has {len(rows)}", str(path)
        )
    frames = []
    for index, row in enumerate(rows):
        frame_path = path / FRAMES_DIR / frame_filename(index)
        if not frame_path.is_file():
            raise MissingFileError("Missing frame file", str(frame_path))
        image = cv2.imread(str(frame_path), cv2.IMREAD_UNCHANGED)
        if image is None:
            raise RecordingError("Unreadable frame file", str(frame_path))
        if image.shape != manifest.calibration.shape:
            raise DimensionMismatchError(manifest.calibration.shape, image.shape, str(frame_path))
        if len(row) != len(LOG_HEADER):
            raise RecordingError(f"Log row {index} has {len(row)} values", str(log_path))
        frames.append(Frame(image, row[1], Pose.from_row(row[2:]), row[0]))
    rec = SweepRecording(manifest, frames)
    rec.validate(str(path))
    return rec
