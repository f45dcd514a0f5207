"""Dense deformation fields and resampling of compressed frames to zero force."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import cv2
import numpy as np
from scipy import ndimage

from uscomp.calibration import CalibrationParams
from uscomp.exceptions import DomainError, InversionError, MissingFileError, ValidationError
from uscomp.io import Frame, SweepRecording
from uscomp.propagation import BoundEvaluator, StiffnessAtlas, SweepPath, evaluator_at, local_model
from uscomp.regression import DisplacementRegression
from uscomp.serializable import Serializable, load_yaml, register_serializable, save_yaml
from uscomp.stiffness import StiffnessModel

logger = logging.getLogger(__name__)

INVERSION_ITERATIONS = 20
INVERSION_TOLERANCE_PX = 0.01
INVERSION_MAX_FAILURES = 0.01
LAMBDA_SOURCES = ("force", "pose")
MASKS_DIR = "masks"


@dataclass
class DeformationField:
    """Displacement (d_x, d_y) in pixels of the content at each reference pixel."""

    dx: np.ndarray
    dy: np.ndarray
    force: float = 0.0
    stiffness: StiffnessModel = None

    def __post_init__(self):
        self.dx = np.asarray(self.dx, dtype=np.float64)
        self.dy = np.asarray(self.dy, dtype=np.float64)
        if self.dx.shape != self.dy.shape or self.dx.ndim != 2:
            raise ValidationError("Field components must be matching 2D arrays")
        if not (np.all(np.isfinite(self.dx)) and np.all(np.isfinite(self.dy))):
            raise ValidationError("Deformation field has non-finite values")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.dx.shape

    @classmethod
    def zeros(cls, shape) -> "DeformationField":
        return cls(np.zeros(shape), np.zeros(shape))

    def sample(self, xs, ys) -> Tuple[np.ndarray, np.ndarray]:
        """Bilinear lookup at sub-pixel positions, edge values beyond the grid."""
        coords = np.array([np.asarray(ys), np.asarray(xs)])
        return (
            ndimage.map_coordinates(self.dx, coords, order=1, mode="nearest"),
            ndimage.map_coordinates(self.dy, coords, order=1, mode="nearest"),
        )

    def rms(self, mask=None) -> float:
        mag2 = self.dx**2 + self.dy**2
        if mask is not None:
            mag2 = mag2[np.asarray(mask, dtype=bool)]
        return float(np.sqrt(np.mean(mag2))) if mag2.size else 0.0


def field_from_model(evaluator: BoundEvaluator, force: float, cal: CalibrationParams) -> DeformationField:
    """Evaluate the cumulative displacement on every reference pixel.

    Raises:
        DomainError: If ``force`` is negative.
    """
    if force < 0:
        raise DomainError(f"Contact force must be non-negative, got {force}")
    dx, dy = evaluator.grid(force, cal)
    return DeformationField(dx, dy, float(force), evaluator.stiffness)


def invert_field(
    field: DeformationField,
    max_iterations: int = INVERSION_ITERATIONS,
    tolerance: float = INVERSION_TOLERANCE_PX,
    max_failures: float = INVERSION_MAX_FAILURES,
) -> DeformationField:
    """Field u on the deformed grid with reference = deformed + u.

    Solves x_ref = x_def - d(x_ref) per pixel by fixed-point iteration.

    Raises:
        InversionError: If more than ``max_failures`` of the pixels still move
            by more than ``tolerance`` after ``max_iterations``.
    """
    ys, xs = np.mgrid[0 : field.shape[0], 0 : field.shape[1]].astype(np.float64)
    x_ref, y_ref = xs.copy(), ys.copy()
    step = np.zeros(field.shape)
    for _ in range(max_iterations):
        dx, dy = field.sample(x_ref, y_ref)
        new_x, new_y = xs - dx, ys - dy
        step = np.hypot(new_x - x_ref, new_y - y_ref)
        x_ref, y_ref = new_x, new_y
        if np.all(step <= tolerance):
            break
    fraction = float(np.mean(step > tolerance))
    if fraction > max_failures:
        raise InversionError(fraction, tolerance)
    return DeformationField(x_ref - xs, y_ref - ys, field.force, field.stiffness)


def _resample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    rows, cols = image.shape
    eps = 1e-9
    mask = (xs >= -eps) & (xs <= cols - 1 + eps) & (ys >= -eps) & (ys <= rows - 1 + eps)
    values = ndimage.map_coordinates(
        image.astype(np.float64), np.array([ys, xs]), order=1, mode="nearest"
    )
    out = np.where(mask, np.clip(np.rint(values), 0, 255), 0).astype(np.uint8)
    return out, mask


def invert_and_resample(image, field: DeformationField) -> Tuple[np.ndarray, np.ndarray]:
    """Estimate the zero-force frame from a compressed one.

    Every reference pixel p takes the deformed intensity at p + d(p). Pixels whose
    source lies outside the frame are set to 0 and cleared in the mask.

    Returns:
        (corrected uint8 image, boolean validity mask)
    """
    img = np.asarray(image)
    if img.shape != field.shape:
        raise DomainError(f"Field shape {field.shape} does not match image {img.shape}")
    ys, xs = np.mgrid[0 : img.shape[0], 0 : img.shape[1]].astype(np.float64)
    return _resample(img, xs + field.dx, ys + field.dy)


def apply_field(reference_image, field: DeformationField) -> Tuple[np.ndarray, np.ndarray]:
    """Render the compressed frame a reference frame turns into under ``field``."""
    img = np.asarray(reference_image)
    if img.shape != field.shape:
        raise DomainError(f"Field shape {field.shape} does not match image {img.shape}")
    inverse = invert_field(field)
    ys, xs = np.mgrid[0 : img.shape[0], 0 : img.shape[1]].astype(np.float64)
    return _resample(img, xs + inverse.dx, ys + inverse.dy)


@register_serializable
class CorrectionModel(Serializable):
    """Everything needed to correct a sweep: regression, stiffness atlas and path."""

    def __init__(
        self,
        regression: DisplacementRegression = None,
        atlas: StiffnessAtlas = None,
        path: SweepPath = None,
        lambda_source: str = "force",
    ):
        super().__init__()
        self.regression = regression if regression is not None else DisplacementRegression()
        self.atlas = atlas if atlas is not None else StiffnessAtlas()
        self.path = path if path is not None else SweepPath()
        self.lambda_source = lambda_source
        self.add_serializable_fields(["regression", "atlas", "path", "lambda_source"])
        self.validate()

    def validate(self) -> None:
        if self.lambda_source not in LAMBDA_SOURCES:
            raise ValidationError(f"lambda_source must be one of {LAMBDA_SOURCES}", self)
        if self.lambda_source == "pose" and len(self.atlas) and not self.atlas.contact_points.size:
            raise ValidationError("Pose-based indentation needs contact points in the atlas", self)

    def save(self, path: Union[str, Path]) -> Path:
        return save_yaml(self, path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CorrectionModel":
        return load_yaml(path, expected=cls)

    def position_of(self, frame: Frame) -> float:
        s = self.path.position_of(frame.pose)
        # poses are logged to finite precision
        if -1e-6 < s < 0.0 or self.atlas.length_mm < s < self.atlas.length_mm + 1e-6:
            s = float(np.clip(s, 0.0, self.atlas.length_mm))
        return s

    def indentation(self, frame: Frame, s: float) -> float:
        """lambda_z of ``frame``: from the blended force law or from the pose."""
        if self.lambda_source == "pose":
            contact = self.atlas.contact_depth_at(s)
            return max(float((frame.pose.translation - contact) @ frame.pose.force_direction), 0.0)
        if frame.force <= 0:
            return 0.0
        law = local_model(self.atlas, s)
        # a fitted contact offset can put lambda(0) away from zero
        return max(float(law.indentation_clamped(frame.force) - law.indentation_clamped(0.0)), 0.0)

    def field_for(self, frame: Frame, cal: CalibrationParams) -> Tuple[DeformationField, float]:
        s = self.position_of(frame)
        evaluator = evaluator_at(self.regression, self.atlas, s)
        lam = self.indentation(frame, s)
        if self.lambda_source == "pose":
            dx, dy = evaluator.at_indentation(*_grid(cal), lam)
            return DeformationField(dx, dy, frame.force, evaluator.stiffness), lam
        return field_from_model(evaluator, frame.force, cal), lam


def _grid(cal: CalibrationParams):
    ys, xs = np.mgrid[0 : cal.image_width, 0 : cal.image_length].astype(np.float64)
    return xs, ys


def correct_frame(model: CorrectionModel, frame: Frame, cal: CalibrationParams) -> Tuple[Frame, np.ndarray]:
    """Corrected zero-force frame, re-posed with the probe retracted by lambda_z."""
    field, lam = model.field_for(frame, cal)
    image, mask = invert_and_resample(frame.image, field)
    pose = frame.pose.translated(-lam * frame.pose.force_direction)
    return Frame(image, 0.0, pose, frame.timestamp), mask


def correct_recording(
    model: CorrectionModel, rec: SweepRecording
) -> Tuple[SweepRecording, List[np.ndarray]]:
    """Correct every frame of a recording.

    Returns:
        (corrected recording, per-frame validity masks)
    """
    frames, masks = [], []
    for frame in rec.frames:
        corrected, mask = correct_frame(model, frame, rec.calibration)
        frames.append(corrected)
        masks.append(mask)
    manifest = type(rec.manifest)(
        calibration=rec.calibration,
        phantom_id=rec.manifest.phantom_id,
        kind=rec.kind,
        acquisition={**rec.manifest.acquisition, "corrected": True},
    )
    valid = float(np.mean([m.mean() for m in masks])) if masks else 0.0
    logger.info("Corrected %d frames, mean valid fraction %.3f", len(frames), valid)
    return SweepRecording(manifest, frames), masks


def write_masks(masks: List[np.ndarray], directory: Union[str, Path]) -> Path:
    directory = Path(directory) / MASKS_DIR
    directory.mkdir(parents=True, exist_ok=True)
    for index, mask in enumerate(masks):
        target = directory / f"{index + 1:06d}.pgm"
        if not cv2.imwrite(str(target), np.where(mask, 255, 0).astype(np.uint8)):
            raise OSError(f"Could not write mask {target}")
    return directory


def read_masks(directory: Union[str, Path], count: int) -> List[np.ndarray]:
    directory = Path(directory) / MASKS_DIR
    masks = []
    for index in range(count):
        target = directory / f"{index + 1:06d}.pgm"
        image = cv2.imread(str(target), cv2.IMREAD_UNCHANGED)
        if image is None:
            raise MissingFileError("Missing mask file", str(target))
        masks.append(image > 127)
    return masks
