"""Freehand compounding of tracked frames into a voxel volume.

Volumes are indexed ``[ix, iy, iz]`` along world x (lateral), y (sweep) and z
(depth). Slices are returned image-like: rows follow depth on axial and
sagittal planes and the sweep direction on coronal planes.
"""

import itertools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from uscomp.calibration import CalibrationParams, pixels_to_world
from uscomp.exceptions import DomainError, MissingFileError, RecordingError, ValidationError
from uscomp.io import SweepRecording
from uscomp.serializable import Serializable, load_yaml, register_serializable, save_yaml

logger = logging.getLogger(__name__)

DEFAULT_SPACING_MM = 0.3
PLANES = ("axial", "coronal", "sagittal")
GRID_SNAP = 1e-6
SPLAT_BATCH = 2_000_000


@dataclass
class Volume:
    """Weighted-mean voxel grid; intensity is meaningful only where weight > 0."""

    intensity: np.ndarray
    weight: np.ndarray
    origin: np.ndarray
    spacing: float

    def __post_init__(self):
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.spacing = float(self.spacing)
        if self.spacing <= 0:
            raise ValidationError("Voxel spacing must be positive")
        if self.intensity.shape != self.weight.shape or self.intensity.ndim != 3:
            raise ValidationError("Intensity and weight must be matching 3D grids")
        if np.any(self.weight < 0):
            raise ValidationError("Voxel weights must be non-negative")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.intensity.shape)

    @property
    def covered(self) -> np.ndarray:
        return self.weight > 0

    def world_of(self, index) -> np.ndarray:
        """World position (mm) of a voxel index."""
        return self.origin + self.spacing * np.asarray(index, dtype=np.float64)

    def index_of(self, point) -> np.ndarray:
        """Nearest voxel index of a world point (not range checked)."""
        return np.rint((np.asarray(point, dtype=np.float64) - self.origin) / self.spacing).astype(int)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Volume)
            and self.spacing == other.spacing
            and np.array_equal(self.origin, other.origin)
            and np.array_equal(self.intensity, other.intensity)
            and np.array_equal(self.weight, other.weight)
        )


def grid_dims(lo, hi, spacing: float) -> np.ndarray:
    """Voxels per axis so that the far corner of the box has its own voxel plane."""
    steps = np.ceil((np.asarray(hi) - np.asarray(lo)) / spacing - GRID_SNAP).astype(np.int64)
    return np.maximum(steps, 0) + 1


def _splat(points, values, lo, dims, spacing, acc: np.ndarray, wsum: np.ndarray) -> None:
    """Add every point to its eight neighbours with trilinear weights.

    Points outside the grid are dropped; a point inside always hands out its
    full unit weight. Axes one voxel thick take the whole weight on that plane.
    """
    f = (points - lo) / spacing
    inside = np.all((f > -GRID_SNAP) & (f < dims - 1 + GRID_SNAP), axis=1)
    if not inside.all():
        f, values = f[inside], values[inside]
    if not f.size:
        return
    base = np.minimum(np.floor(np.maximum(f, 0.0)).astype(np.int64), np.maximum(dims - 2, 0))
    frac = np.clip(f - base, 0.0, 1.0)
    strides = np.array([dims[1] * dims[2], dims[2], 1], dtype=np.int64)
    flat = base @ strides
    corners = []
    for axis in range(3):
        if dims[axis] > 1:
            corners.append(((0, 1.0 - frac[:, axis]), (int(strides[axis]), frac[:, axis])))
        else:
            corners.append(((0, None),))
    for (ox, wx), (oy, wy), (oz, wz) in itertools.product(*corners):
        w = np.ones(f.shape[0])
        for part in (wx, wy, wz):
            if part is not None:
                w *= part
        index = flat + (ox + oy + oz)
        wsum += np.bincount(index, weights=w, minlength=wsum.size)
        acc += np.bincount(index, weights=w * values, minlength=acc.size)


def _flush(pending, lo, dims, spacing, acc: np.ndarray, wsum: np.ndarray) -> None:
    if pending:
        points = np.concatenate([p[0] for p in pending])
        values = np.concatenate([p[1] for p in pending])
        _splat(points, values, lo, dims, spacing, acc, wsum)
        pending.clear()


def compound(
    rec: SweepRecording,
    cal: Optional[CalibrationParams] = None,
    spacing: float = DEFAULT_SPACING_MM,
    masks: Optional[Sequence[np.ndarray]] = None,
    bounds: Optional[Tuple[Sequence[float], Sequence[float]]] = None,
) -> Volume:
    """Splat every unmasked pixel into the grid with trilinear weights.

    Args:
        rec: Frames with their poses.
        cal: Calibration, defaulting to the recording's.
        spacing: Isotropic voxel size, mm.
        masks: Optional per-frame validity masks; masked pixels are skipped.
        bounds: Optional (min corner, max corner) in world mm; fitted to the
            projected frames when omitted.

    Raises:
        DomainError: Fewer than two frames, bad spacing or nothing to splat.
    """
    cal = cal if cal is not None else rec.calibration
    if len(rec) < 2:
        raise DomainError("Compounding needs at least 2 frames")
    if spacing <= 0:
        raise DomainError(f"Voxel spacing must be positive, got {spacing}")
    if masks is not None and len(masks) != len(rec):
        raise DomainError("One mask per frame is required")
    if bounds is None:
        lo, hi = shared_bounds([rec], cal)
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    if np.any(hi < lo):
        raise DomainError("Empty compounding bounds")
    dims = grid_dims(lo, hi, spacing)
    n_vox = int(np.prod(dims))
    acc = np.zeros(n_vox)
    wsum = np.zeros(n_vox)
    ys, xs = np.mgrid[0 : cal.image_width, 0 : cal.image_length].astype(np.float64)
    pending: List[Tuple[np.ndarray, np.ndarray]] = []
    for index, frame in enumerate(rec.frames):
        keep = np.ones(cal.shape, dtype=bool) if masks is None else np.asarray(masks[index], dtype=bool)
        points = pixels_to_world(xs[keep], ys[keep], cal, frame.pose)
        pending.append((points, frame.image[keep].astype(np.float64)))
        if sum(p[1].size for p in pending) >= SPLAT_BATCH:
            _flush(pending, lo, dims, spacing, acc, wsum)
    _flush(pending, lo, dims, spacing, acc, wsum)
    if not np.any(wsum > 0):
        raise DomainError("No pixel landed in the volume; nothing to compound")
    intensity = np.divide(acc, wsum, out=np.zeros(n_vox), where=wsum > 0)
    volume = Volume(intensity.reshape(tuple(dims)), wsum.reshape(tuple(dims)), lo, spacing)
    logger.info(
        "Compounded %d frames into %s voxels at %.3g mm, %.1f%% covered",
        len(rec),
        "x".join(str(d) for d in dims),
        spacing,
        100.0 * float(volume.covered.mean()),
    )
    return volume


def shared_bounds(recordings: Sequence[SweepRecording], cal: Optional[CalibrationParams] = None):
    """Bounding box covering several recordings, so their volumes share one grid."""
    lows, highs = [], []
    for rec in recordings:
        c = cal if cal is not None else rec.calibration
        corners_x = np.array([0.0, c.image_length - 1, 0.0, c.image_length - 1])
        corners_y = np.array([0.0, 0.0, c.image_width - 1, c.image_width - 1])
        for frame in rec.frames:
            world = pixels_to_world(corners_x, corners_y, c, frame.pose)
            lows.append(world.min(axis=0))
            highs.append(world.max(axis=0))
    return np.min(lows, axis=0), np.max(highs, axis=0)


def extract_slice(vol: Volume, plane: str, index: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest-plane slice of intensity and its coverage mask.

    Raises:
        DomainError: Unknown plane or index out of range.
    """
    if plane not in PLANES:
        raise DomainError(f"Unknown plane '{plane}', expected one of {PLANES}")
    axis = {"sagittal": 0, "axial": 1, "coronal": 2}[plane]
    if not 0 <= index < vol.dims[axis]:
        raise DomainError(f"{plane} index {index} outside [0, {vol.dims[axis]})")
    take = [slice(None)] * 3
    take[axis] = index
    return vol.intensity[tuple(take)].T, vol.covered[tuple(take)].T


def slice_count(vol: Volume, plane: str) -> int:
    return vol.dims[{"sagittal": 0, "axial": 1, "coronal": 2}[plane]]


@register_serializable
class VolumeHeader(Serializable):
    """Sidecar header of a raw volume file."""

    def __init__(self, dims=(1, 1, 1), origin=(0.0, 0.0, 0.0), spacing: float = DEFAULT_SPACING_MM):
        super().__init__()
        self.dims = [int(d) for d in dims]
        self.origin = [float(o) for o in origin]
        self.spacing = float(spacing)
        self.dtype = "<f8"
        self.layout = ["intensity", "weight"]
        self.order = "C"
        self.add_serializable_fields(["dims", "origin", "spacing", "dtype", "layout", "order"])


def volume_files(path: Union[str, Path]) -> Tuple[Path, Path]:
    """(raw, header) paths of a volume; dots inside the stem are kept."""
    path = Path(path)
    if path.suffix in (".raw", ".yaml"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".raw"), path.with_name(path.name + ".yaml")


def write_volume(vol: Volume, path: Union[str, Path]) -> Path:
    """Write ``<path>.raw`` (intensity then weight, little-endian float64) and ``<path>.yaml``."""
    raw_path, header_path = volume_files(path)
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    save_yaml(VolumeHeader(vol.dims, vol.origin, vol.spacing), header_path)
    with open(raw_path, "wb") as handle:
        handle.write(vol.intensity.astype("<f8").tobytes(order="C"))
        handle.write(vol.weight.astype("<f8").tobytes(order="C"))
    return raw_path


def read_volume(path: Union[str, Path]) -> Volume:
    """Load a volume written by ``write_volume``.

    Raises:
        MissingFileError: If the raw file or its header is missing.
        RecordingError: If the raw size does not match the header.
    """
    raw_path, header_path = volume_files(path)
    for required in (raw_path, header_path):
        if not required.is_file():
            raise MissingFileError("Missing volume file", str(required))
    header = load_yaml(header_path, expected=VolumeHeader)
    raw = np.fromfile(raw_path, dtype="<f8")
    n = int(np.prod(header.dims))
    if raw.size != 2 * n:
        raise RecordingError(f"Volume file holds {raw.size} values, header expects {2 * n}", str(raw_path))
    return Volume(
        raw[:n].reshape(header.dims).astype(np.float64),
        raw[n:].reshape(header.dims).astype(np.float64),
        np.array(header.origin),
        header.spacing,
    )


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.uint8)


def export_slice_pgm(image: np.ndarray, path: Union[str, Path]) -> Path:
    """Write a slice as an 8-bit binary graymap."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), to_uint8(image)):
        raise OSError(f"Could not write slice {path}")
    return path


def export_slices(
    vol: Volume,
    directory: Union[str, Path],
    indices: Optional[Dict[str, int]] = None,
    prefix: str = "",
) -> List[Path]:
    """Write ``<prefix><plane>_<index>.pgm`` for each requested plane, the middle slice by default.

    Raises:
        DomainError: Unknown plane or index out of range.
    """
    indices = indices if indices is not None else {plane: slice_count(vol, plane) // 2 for plane in PLANES}
    paths = []
    for plane, index in indices.items():
        image, _ = extract_slice(vol, plane, int(index))
        paths.append(export_slice_pgm(image, Path(directory) / f"{prefix}{plane}_{int(index)}.pgm"))
    return paths
