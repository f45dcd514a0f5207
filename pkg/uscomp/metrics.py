"""Vessel segmentation and the comparison metrics: dice, centroid offset, area."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import ndimage
from skimage.filters import threshold_otsu

from uscomp.calibration import CalibrationParams
from uscomp.compounding import Volume, extract_slice, slice_count
from uscomp.exceptions import DomainError, NoVesselError

logger = logging.getLogger(__name__)

SMOOTHING_SIGMA = 2.0
MAX_LUMEN_CONTRAST = 0.5
METRIC_FRAMES = 10
REPORT_COLUMNS = ["label", "frame", "dice", "centroid_offset_mm", "area_mm2"]

Scales = Union[CalibrationParams, Tuple[float, float]]


@dataclass
class VesselMask:
    """Segmented lumen of one image."""

    mask: np.ndarray
    frame_id: Optional[int] = None
    threshold: float = 0.0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def area_px(self) -> int:
        return int(np.count_nonzero(self.mask))

    @property
    def empty(self) -> bool:
        return self.area_px == 0

    def centroid(self) -> Tuple[float, float]:
        """(x, y) pixel centroid.

        Raises:
            NoVesselError: If the mask is empty.
        """
        if self.empty:
            raise NoVesselError("Centroid of an empty vessel mask")
        ys, xs = np.nonzero(self.mask)
        return float(xs.mean()), float(ys.mean())


def _scales(cal: Scales) -> Tuple[float, float]:
    if isinstance(cal, CalibrationParams):
        return cal.lateral_scale, cal.axial_scale
    sx, sy = cal
    return float(sx), float(sy)


def segment_vessel(
    image,
    valid: Optional[np.ndarray] = None,
    frame_id: Optional[int] = None,
    sigma: float = SMOOTHING_SIGMA,
) -> VesselMask:
    """Dark-lumen segmentation: Otsu on the smoothed inverted image, largest component, holes filled.

    Args:
        image: Grayscale frame or slice.
        valid: Pixels allowed to take part; others are excluded from threshold and mask.
        frame_id: Carried into the result.
        sigma: Gaussian smoothing before thresholding, px.

    Raises:
        NoVesselError: If nothing darker than the surrounding tissue is found.
    """
    img = np.asarray(image, dtype=np.float64)
    valid = np.ones(img.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise NoVesselError("No valid pixels to segment")
    inverted = 255.0 - ndimage.gaussian_filter(img, sigma)
    values = inverted[valid]
    if np.ptp(values) == 0:
        raise NoVesselError("Uniform image has no vessel")
    threshold = float(threshold_otsu(values))
    labels, count = ndimage.label((inverted > threshold) & valid)
    if count == 0:
        raise NoVesselError("Thresholding found no lumen")
    sizes = np.bincount(labels.ravel())[1:]
    largest = labels == (int(np.argmax(sizes)) + 1)
    mask = ndimage.binary_fill_holes(largest) & valid
    outside = valid & ~mask
    if outside.any() and img[mask].mean() > MAX_LUMEN_CONTRAST * img[outside].mean():
        raise NoVesselError("Segmented region is not darker than the tissue")
    return VesselMask(mask, frame_id, 255.0 - threshold)


def dice(a: VesselMask, b: VesselMask) -> float:
    """2|A & B| / (|A| + |B|); two empty masks count as a perfect match.

    Raises:
        DomainError: If the masks differ in shape.
    """
    if a.mask.shape != b.mask.shape:
        raise DomainError(f"Mask shapes differ: {a.mask.shape} vs {b.mask.shape}")
    total = a.area_px + b.area_px
    if total == 0:
        logger.warning("Dice of two empty masks reported as 1.0")
        return 1.0
    return 2.0 * float(np.count_nonzero(a.mask & b.mask)) / float(total)


def centroid_offset(mask: VesselMask, reference: VesselMask, cal: Scales) -> float:
    """Euclidean distance (mm) between the two centroids.

    Raises:
        NoVesselError: If either mask is empty.
    """
    sx, sy = _scales(cal)
    x0, y0 = reference.centroid()
    x1, y1 = mask.centroid()
    return float(np.hypot((x1 - x0) * sx, (y1 - y0) * sy))


def cross_section_area(mask: VesselMask, cal: Scales) -> float:
    """Lumen area in mm^2."""
    sx, sy = _scales(cal)
    return mask.area_px * sx * sy


def vessel_width(mask: VesselMask, col_spacing_mm: float, valid: Optional[np.ndarray] = None) -> float:
    """Mean width (mm) of the vessel across the image columns.

    The mean runs over rows holding any valid pixel (any vessel pixel when
    ``valid`` is omitted); a valid row without vessel counts as zero width.
    """
    rows = (mask.mask if valid is None else np.asarray(valid, dtype=bool)).any(axis=1)
    n_rows = int(np.count_nonzero(rows))
    if n_rows == 0:
        return 0.0
    return float(np.count_nonzero(mask.mask[rows])) / n_rows * float(col_spacing_mm)


def normalized_cross_correlation(a, b, valid: Optional[np.ndarray] = None) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if valid is not None:
        a, b = a[np.asarray(valid, dtype=bool)], b[np.asarray(valid, dtype=bool)]
    a = a - a.mean()
    b = b - b.mean()
    denom = float(np.sqrt(np.sum(a * a) * np.sum(b * b)))
    return float(np.sum(a * b) / denom) if denom > 0 else 0.0


def sample_frames(n_frames: int, count: int = METRIC_FRAMES, seed: int = 0) -> List[int]:
    """Sorted random frame indices, reproducible for a given seed."""
    count = min(count, n_frames)
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(n_frames, size=count, replace=False))


def select_max_area_slice(vol: Volume, plane: str = "axial", indices: Optional[Iterable[int]] = None) -> int:
    """Slice index where the segmented vessel area is largest; ties go to the lowest index.

    Raises:
        NoVesselError: If no slice shows a vessel.
    """
    indices = range(slice_count(vol, plane)) if indices is None else indices
    best, best_area = None, 0
    for index in indices:
        image, covered = extract_slice(vol, plane, index)
        if not covered.any():
            continue
        try:
            area = segment_vessel(image, covered, index).area_px
        except NoVesselError:
            continue
        if area > best_area:
            best, best_area = index, area
    if best is None:
        raise NoVesselError(f"No {plane} slice shows a vessel")
    return best


def compare_masks(
    test: VesselMask, reference: VesselMask, cal: Scales, label: str, frame: int
) -> dict:
    return {
        "label": label,
        "frame": frame,
        "dice": dice(test, reference),
        "centroid_offset_mm": centroid_offset(test, reference, cal),
        "area_mm2": cross_section_area(test, cal),
    }


@dataclass
class MetricsReport:
    """Per-frame metric rows and their per-label summary."""

    rows: List[dict] = field(default_factory=list)

    def add(self, row: dict) -> None:
        self.rows.append(row)

    def extend(self, rows: Iterable[dict]) -> None:
        self.rows.extend(rows)

    def table(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=list(dict.fromkeys(REPORT_COLUMNS + self._extra_columns())))

    def _extra_columns(self) -> List[str]:
        extra = []
        for row in self.rows:
            extra.extend(k for k in row if k not in REPORT_COLUMNS)
        return extra

    def summary(self, by: Sequence[str] = ("label",)) -> pd.DataFrame:
        """Mean and SD of each metric per group."""
        table = self.table()
        values = [c for c in table.columns if c not in REPORT_COLUMNS[:2] and c not in by]
        metrics = table[list(by) + values]
        grouped = metrics.groupby(list(by), sort=False)
        out = grouped.agg(["mean", "std"])
        out.columns = [f"{name}_{stat}" for name, stat in out.columns]
        return out.reset_index()

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.table().to_csv(path, index=False, float_format="%.10g")
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "MetricsReport":
        return cls(pd.read_csv(path).to_dict("records"))


def frame_metrics(
    images: Sequence[np.ndarray],
    references: Sequence[np.ndarray],
    cal: Scales,
    label: str,
    frame_ids: Sequence[int],
    valid: Optional[Sequence[np.ndarray]] = None,
    allow_missing: bool = True,
) -> List[dict]:
    """Compare the selected frames against the ground-truth frames at the same indices.

    With ``allow_missing`` a frame whose vessel cannot be segmented is reported
    with dice 0, area 0 and an undefined centroid offset instead of raising.
    """
    rows = []
    for i in frame_ids:
        ref = segment_vessel(references[i], frame_id=i)
        try:
            test = segment_vessel(images[i], None if valid is None else valid[i], frame_id=i)
        except NoVesselError:
            if not allow_missing:
                raise
            logger.warning("No vessel found in %s frame %d", label, i)
            rows.append(missing_row(label, i))
            continue
        rows.append(compare_masks(test, ref, cal, label, i))
    return rows


def missing_row(label: str, frame: int) -> dict:
    return {"label": label, "frame": frame, "dice": 0.0, "centroid_offset_mm": np.nan, "area_mm2": 0.0}
