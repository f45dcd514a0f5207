"""Stiffness interpolation along the sweep and rebinding of a fitted regression."""

import logging
from typing import List, Optional, Sequence, Union

import numpy as np

from uscomp.calibration import CalibrationParams, Pose
from uscomp.exceptions import DomainError, ValidationError
from uscomp.regression import DisplacementRegression, eval_cumulative
from uscomp.serializable import Serializable, register_serializable
from uscomp.stiffness import StiffnessModel, blend_models

logger = logging.getLogger(__name__)

COINCIDENCE_MM = 1e-9


@register_serializable
class SweepPath(Serializable):
    """Straight sweep trajectory: arc length is measured along the first pose's elevational axis."""

    array_fields = ("origin", "direction")

    def __init__(self, origin=None, direction=None, start_mm: float = 0.0, length_mm: float = 0.0):
        super().__init__()
        self.origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=np.float64)
        self.direction = (
            np.array([0.0, 1.0, 0.0]) if direction is None else np.asarray(direction, dtype=np.float64)
        )
        self.start_mm = float(start_mm)
        self.length_mm = float(length_mm)
        self.add_serializable_fields(["origin", "direction", "start_mm", "length_mm"])
        self.validate()

    def validate(self) -> None:
        norm = float(np.linalg.norm(self.direction))
        if abs(norm - 1.0) > 1e-9:
            raise ValidationError(f"Sweep direction must be a unit vector (|d| = {norm})", self)
        if self.length_mm < 0:
            raise ValidationError("Trajectory length must be non-negative", self)

    @classmethod
    def from_poses(cls, poses: Sequence[Pose], start_mm: float = 0.0, length_mm: Optional[float] = None):
        """Anchor the path at the first pose; ``length_mm`` defaults to the extent of ``poses``."""
        if not poses:
            raise DomainError("A sweep path needs at least one pose")
        path = cls(poses[0].translation, poses[0].elevational_direction, start_mm, 0.0)
        if length_mm is None:
            length_mm = float(np.max(path.positions(poses)))
        path.length_mm = float(length_mm)
        return path

    def position_of(self, pose: Pose) -> float:
        return self.start_mm + float((pose.translation - self.origin) @ self.direction)

    def positions(self, poses: Sequence[Pose]) -> np.ndarray:
        t = np.array([p.translation for p in poses])
        return self.start_mm + (t - self.origin) @ self.direction


@register_serializable
class StiffnessAtlas(Serializable):
    """Force laws sampled by palpation at positions along the trajectory.

    ``contact_points`` optionally holds the world-frame probe position at contact
    onset for each sample, used to read indentation directly from poses.
    """

    array_fields = ("contact_points",)

    def __init__(
        self,
        sample_positions: Sequence[float] = (),
        models: Sequence[StiffnessModel] = (),
        length_mm: float = 0.0,
        contact_points=None,
    ):
        super().__init__()
        self.sample_positions = [float(s) for s in sample_positions]
        self.models = list(models)
        self.length_mm = float(length_mm)
        self.contact_points = (
            np.zeros((0, 3)) if contact_points is None else np.asarray(contact_points, dtype=np.float64)
        )
        self.add_serializable_fields(["sample_positions", "models", "length_mm", "contact_points"])
        if self.sample_positions:
            self.validate()

    def validate(self) -> None:
        pos = np.asarray(self.sample_positions)
        if len(self.models) != pos.size:
            raise ValidationError("Each sample position needs one force law", self)
        if pos.size < 2:
            raise ValidationError("Stiffness must be sampled at least twice along the trajectory", self)
        if np.any(np.diff(pos) <= 0):
            raise ValidationError("Sample positions must be strictly increasing", self)
        if pos[0] < 0 or pos[-1] > self.length_mm:
            raise ValidationError(f"Sample positions outside [0, {self.length_mm}] mm", self)
        if self.contact_points.size and self.contact_points.shape != (pos.size, 3):
            raise ValidationError("Contact points must be one 3-vector per sample", self)

    def __len__(self) -> int:
        return len(self.sample_positions)

    def contact_depth_at(self, s: float) -> Optional[np.ndarray]:
        """Weighted contact-onset point at ``s``, or None when not recorded."""
        if not self.contact_points.size:
            return None
        return interpolation_weights(self, s) @ self.contact_points


def interpolation_weights(atlas: StiffnessAtlas, s: float) -> np.ndarray:
    """Distance-based weights of the sampled force laws at position ``s``.

    Each weight is the summed distance to all samples over the distance to that
    sample, normalized to sum to one; a coincident sample gets the whole weight.

    Raises:
        DomainError: Empty atlas or ``s`` outside the trajectory.
    """
    if len(atlas) == 0:
        raise DomainError("Stiffness atlas is empty")
    if not 0.0 <= s <= atlas.length_mm:
        raise DomainError(f"Position {s} mm outside trajectory [0, {atlas.length_mm}]")
    dist = np.abs(np.asarray(atlas.sample_positions) - float(s))
    hit = np.flatnonzero(dist < COINCIDENCE_MM)
    if hit.size:
        weights = np.zeros(dist.size)
        weights[hit[0]] = 1.0
        return weights
    raw = dist.sum() / dist
    return raw / raw.sum()


def local_stiffness(atlas: StiffnessAtlas, s: float, lambda_z) -> np.ndarray:
    """Blended dynamic stiffness (N/mm) at position ``s`` and indentation ``lambda_z``."""
    weights = interpolation_weights(atlas, s)
    k = np.array([m.dynamic_stiffness(lambda_z) for m in atlas.models])
    value = np.tensordot(weights, k, axes=1)
    return float(value) if np.ndim(value) == 0 else value


def local_model(atlas: StiffnessAtlas, s: float) -> StiffnessModel:
    """Force law at ``s`` whose k_d equals ``local_stiffness`` at every indentation."""
    return blend_models(interpolation_weights(atlas, s), atlas.models)


class BoundEvaluator:
    """A fitted regression evaluated with a different stiffness; K^x and K^y are untouched."""

    def __init__(self, regression: DisplacementRegression, stiffness: StiffnessModel):
        self.regression = regression
        self.stiffness = stiffness

    def __call__(self, x, y, force: float):
        return eval_cumulative(self.regression, x, y, force, self.stiffness)

    def at_indentation(self, x, y, lambda_z: float):
        """Evaluate at the force the bound law needs to reach ``lambda_z``."""
        force = max(float(self.stiffness.force_at(max(float(lambda_z), 0.0))), 0.0)
        return self(x, y, force)

    def grid(self, force: float, cal: CalibrationParams):
        """Displacement on every reference pixel, shaped like a frame."""
        ys, xs = np.mgrid[0 : cal.image_width, 0 : cal.image_length].astype(np.float64)
        return self(xs, ys, force)

    def __repr__(self) -> str:
        return f"BoundEvaluator({self.regression!r}, {self.stiffness!r})"


def rebind(reg: DisplacementRegression, k_d: Union[float, StiffnessModel]) -> BoundEvaluator:
    """Bind ``reg`` to a local stiffness: a constant k_d (N/mm) or a full force law.

    Raises:
        DomainError: If a constant ``k_d`` is not positive.
    """
    model = k_d if isinstance(k_d, StiffnessModel) else StiffnessModel.linear(float(k_d))
    return BoundEvaluator(reg, model)


def evaluator_at(reg: DisplacementRegression, atlas: StiffnessAtlas, s: float) -> BoundEvaluator:
    return rebind(reg, local_model(atlas, s))


def force_based_evaluator(reg: DisplacementRegression) -> BoundEvaluator:
    """Baseline that ignores stiffness variation and keeps the training force law."""
    return BoundEvaluator(reg, reg.stiffness)


def equidistant_positions(length_mm: float, n_samples: int) -> List[float]:
    """Palpation positions spread evenly over [0, length], ends included."""
    if n_samples < 2:
        raise DomainError("Stiffness must be sampled at least twice along the trajectory")
    return [float(s) for s in np.linspace(0.0, float(length_mm), n_samples)]
