"""Spatial calibration: image pixels -> probe frame -> world (robot base) frame.

The image frame has its origin at the top-left pixel, x growing laterally and
y growing with depth. The probe frame has its origin at the centre of the
transducer face, x lateral, y elevational (image normal) and z along the probe
axis into the tissue.
"""

from typing import NamedTuple, Sequence, Union

import numpy as np

from uscomp.exceptions import DomainError, ValidationError
from uscomp.serializable import Serializable, register_serializable

ORTHONORMAL_TOL = 1e-9


class PixelCoord(NamedTuple):
    """Pixel position; fractional values address sub-pixel locations."""

    x: float
    y: float


@register_serializable
class CalibrationParams(Serializable):
    """Image geometry of the probe.

    Attributes:
        image_length: L_I, lateral image size in pixels.
        image_width: W_I, axial image size in pixels.
        depth_mm: D_I, physical scan depth.
        element_length_mm: L_p, physical length of the transducer elements.
        offset_mm: epsilon, distance from the probe origin to the image origin.
    """

    def __init__(
        self,
        image_length: int = 400,
        image_width: int = 300,
        depth_mm: float = 40.0,
        element_length_mm: float = 37.5,
        offset_mm: float = 0.0,
    ):
        super().__init__()
        self.image_length = int(image_length)
        self.image_width = int(image_width)
        self.depth_mm = float(depth_mm)
        self.element_length_mm = float(element_length_mm)
        self.offset_mm = float(offset_mm)
        self.add_serializable_fields(
            ["image_length", "image_width", "depth_mm", "element_length_mm", "offset_mm"]
        )
        self.validate()

    def validate(self) -> None:
        if self.image_length < 2 or self.image_width < 2:
            raise ValidationError("Image dimensions must be at least 2 pixels", self)
        if self.depth_mm <= 0 or self.element_length_mm <= 0:
            raise ValidationError("Scan depth and element length must be positive", self)
        if self.offset_mm < 0:
            raise ValidationError("Probe-to-image offset must be non-negative", self)

    @property
    def lateral_scale(self) -> float:
        """Millimetres per lateral pixel (L_p / L_I)."""
        return self.element_length_mm / self.image_length

    @property
    def axial_scale(self) -> float:
        """Millimetres per axial pixel (D_I / W_I)."""
        return self.depth_mm / self.image_width

    @property
    def pixel_area(self) -> float:
        return self.lateral_scale * self.axial_scale

    @property
    def shape(self):
        """Array shape (rows, cols) of a frame."""
        return (self.image_width, self.image_length)

    def __eq__(self, other) -> bool:
        return isinstance(other, CalibrationParams) and self.serialize() == other.serialize()

    def __repr__(self) -> str:
        return (
            f"CalibrationParams(L_I={self.image_length}, W_I={self.image_width}, "
            f"D_I={self.depth_mm}, L_p={self.element_length_mm}, eps={self.offset_mm})"
        )


@register_serializable
class Pose(Serializable):
    """Rigid transform from the probe frame to the world frame."""

    array_fields = ("rotation", "translation")

    def __init__(self, rotation=None, translation=None):
        super().__init__()
        self.rotation = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        self.translation = (
            np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64)
        )
        self.add_serializable_fields(["rotation", "translation"])
        self.validate()

    def validate(self) -> None:
        r = self.rotation
        if r.shape != (3, 3) or self.translation.shape != (3,):
            raise ValidationError("Pose needs a 3x3 rotation and a 3-vector translation", self)
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(self.translation)):
            raise ValidationError("Pose contains non-finite values", self)
        if np.max(np.abs(r @ r.T - np.eye(3))) > ORTHONORMAL_TOL:
            raise ValidationError("Rotation is not orthonormal", self)
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise ValidationError("Rotation determinant is not +1", self)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, matrix) -> "Pose":
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_row(cls, row: Sequence[float]) -> "Pose":
        """Build a pose from 12 numbers: the top 3x4 block of the matrix, row-major."""
        values = np.asarray(row, dtype=np.float64)
        if values.shape != (12,):
            raise ValidationError(f"Pose row needs 12 values, got {values.size}")
        block = values.reshape(3, 4)
        return cls(block[:, :3], block[:, 3])

    def to_row(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]]).reshape(-1)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Transform points of shape (3,) or (N, 3) into the world frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def translated(self, offset) -> "Pose":
        return Pose(self.rotation, self.translation + np.asarray(offset, dtype=np.float64))

    @property
    def force_direction(self) -> np.ndarray:
        """Probe axis (probe z) in world coordinates; contact force acts along it."""
        return self.rotation[:, 2].copy()

    @property
    def elevational_direction(self) -> np.ndarray:
        return self.rotation[:, 1].copy()

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Pose)
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __repr__(self) -> str:
        return f"Pose(t={self.translation.tolist()})"


def image_to_probe_matrix(cal: CalibrationParams) -> np.ndarray:
    """Homogeneous transform from image pixels to the probe frame."""
    return np.array(
        [
            [cal.lateral_scale, 0.0, 0.0, -cal.element_length_mm / 2.0],
            [0.0, 0.0, -1.0, 0.0],
            [0.0, cal.axial_scale, 0.0, cal.offset_mm],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )


def _check_bounds(xs: np.ndarray, ys: np.ndarray, cal: CalibrationParams) -> None:
    inside = (xs >= 0) & (xs <= cal.image_length) & (ys >= 0) & (ys <= cal.image_width)
    if not np.all(inside):
        bad = int(np.flatnonzero(~inside.ravel())[0])
        raise DomainError(
            f"Pixel ({xs.ravel()[bad]}, {ys.ravel()[bad]}) outside image "
            f"{cal.image_length}x{cal.image_width}"
        )


def pixels_to_probe(xs, ys, cal: CalibrationParams) -> np.ndarray:
    """Vectorized image -> probe mapping.

    Returns:
        Array of shape (..., 3) in millimetres.

    Raises:
        DomainError: If any pixel lies outside the image.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    _check_bounds(xs, ys, cal)
    lateral = cal.lateral_scale * xs - cal.element_length_mm / 2.0
    depth = cal.axial_scale * ys + cal.offset_mm
    return np.stack([lateral, np.zeros_like(lateral), depth], axis=-1)


def pixel_to_probe(p: Union[PixelCoord, Sequence[float]], cal: CalibrationParams) -> np.ndarray:
    """Map one pixel into the probe frame (mm)."""
    x, y = p
    return pixels_to_probe(np.array([x]), np.array([y]), cal)[0]


def pixels_to_world(xs, ys, cal: CalibrationParams, probe_pose: Pose) -> np.ndarray:
    """Vectorized image -> world mapping."""
    return probe_pose.apply(pixels_to_probe(xs, ys, cal))


def pixel_to_world(
    p: Union[PixelCoord, Sequence[float]], cal: CalibrationParams, probe_pose: Pose
) -> np.ndarray:
    """Map one pixel into the world frame: world <- probe <- image."""
    return probe_pose.apply(pixel_to_probe(p, cal))
