"""Quadratic force-indentation law and dynamic stiffness.

Stiffness values are in N/mm internally; ``N_PER_MM_TO_N_PER_M`` converts for
display.
"""

import logging
from typing import Dict, Sequence, Tuple, Union

import numpy as np

from uscomp.exceptions import (
    DegenerateFitError,
    DomainError,
    NonPhysicalStiffnessError,
    ValidationError,
)
from uscomp.io import SweepRecording
from uscomp.serializable import Serializable, register_serializable

logger = logging.getLogger(__name__)

MIN_SAMPLES = 10
CONTACT_THRESHOLD_N = 0.2
N_PER_MM_TO_N_PER_M = 1000.0

SampleArray = Union[np.ndarray, Sequence[Tuple[float, float]]]


@register_serializable
class StiffnessModel(Serializable):
    """F = c1*lambda^2 + c2*lambda + c3 with k_d = 2*c1*lambda + c2.

    Attributes:
        c1: N/mm^2
        c2: N/mm
        c3: N, contact offset
        fit_r2: coefficient of determination of the fit
        sample_count: number of samples fitted
        lambda_min, lambda_max: fitted indentation range, mm
    """

    def __init__(
        self,
        c1: float = 0.0,
        c2: float = 1.0,
        c3: float = 0.0,
        fit_r2: float = 1.0,
        sample_count: int = 0,
        lambda_min: float = 0.0,
        lambda_max: float = 0.0,
    ):
        super().__init__()
        self.c1 = float(c1)
        self.c2 = float(c2)
        self.c3 = float(c3)
        self.fit_r2 = float(fit_r2)
        self.sample_count = int(sample_count)
        self.lambda_min = float(lambda_min)
        self.lambda_max = float(lambda_max)
        self.add_serializable_fields(
            ["c1", "c2", "c3", "fit_r2", "sample_count", "lambda_min", "lambda_max"]
        )
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.fit_r2 <= 1.0:
            raise ValidationError(f"fit_r2 {self.fit_r2} outside [0, 1]", self)
        for lam in (self.lambda_min, self.lambda_max):
            if self.dynamic_stiffness(lam) <= 0:
                raise NonPhysicalStiffnessError("Dynamic stiffness must be positive", lam)

    @classmethod
    def linear(cls, stiffness: float) -> "StiffnessModel":
        """A constant-stiffness law F = k * lambda."""
        if stiffness <= 0:
            raise DomainError(f"Stiffness must be positive, got {stiffness}")
        return cls(c1=0.0, c2=stiffness, c3=0.0)

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([self.c1, self.c2, self.c3])

    def force_at(self, lam):
        return self.c1 * np.square(lam) + self.c2 * np.asarray(lam) + self.c3

    def dynamic_stiffness(self, lam):
        """k_d(lambda) = 2*c1*lambda + c2, N/mm."""
        return 2.0 * self.c1 * np.asarray(lam, dtype=np.float64) + self.c2

    def indentation_for_force(self, force):
        """Positive root of the force law for ``force`` (vectorized).

        Raises:
            DomainError: If any force is below the contact offset c3.
            NonPhysicalStiffnessError: If the law has no real root.
        """
        f = np.asarray(force, dtype=np.float64)
        excess = f - self.c3
        if np.any(excess < 0):
            raise DomainError(f"Force below contact offset c3={self.c3:.6g} N")
        disc = self.c2 * self.c2 + 4.0 * self.c1 * excess
        if np.any(disc < 0):
            raise NonPhysicalStiffnessError("Force law has no real indentation for this force")
        # rationalized root, stable for c1 -> 0
        lam = 2.0 * excess / (self.c2 + np.sqrt(disc))
        return float(lam) if lam.ndim == 0 else lam

    def indentation_clamped(self, force):
        """Like ``indentation_for_force`` but forces below c3 map to zero indentation."""
        return self.indentation_for_force(np.maximum(np.asarray(force, dtype=np.float64), self.c3))

    def summary(self, lambdas) -> Tuple[float, float]:
        """Mean and SD of k_d over the given indentations, in N/m."""
        k = self.dynamic_stiffness(np.asarray(lambdas, dtype=np.float64)) * N_PER_MM_TO_N_PER_M
        return float(np.mean(k)), float(np.std(k))

    def __repr__(self) -> str:
        return (
            f"StiffnessModel(c1={self.c1:.6g}, c2={self.c2:.6g}, c3={self.c3:.6g}, "
            f"R2={self.fit_r2:.4f}, n={self.sample_count})"
        )


def blend_models(weights: Sequence[float], models: Sequence[StiffnessModel]) -> StiffnessModel:
    """Convex combination of force laws.

    k_d is linear in the coefficients, so the blended law's k_d equals the
    weighted sum of the individual k_d at every indentation.
    """
    w = np.asarray(weights, dtype=np.float64)
    coeffs = np.array([m.coefficients for m in models])
    c1, c2, c3 = w @ coeffs
    lo = min(m.lambda_min for m in models)
    hi = max(m.lambda_max for m in models)
    return StiffnessModel(c1=c1, c2=c2, c3=c3, lambda_min=lo, lambda_max=hi)


def _as_samples(samples: SampleArray) -> Tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DomainError("Samples must be (lambda_z, F_c) pairs")
    return arr[:, 0], arr[:, 1]


def _r2(observed: np.ndarray, predicted: np.ndarray) -> float:
    ss_res = float(np.sum((observed - predicted) ** 2))
    ss_tot = float(np.sum((observed - observed.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return float(np.clip(1.0 - ss_res / ss_tot, 0.0, 1.0))


def polynomial_r2(samples: SampleArray, degree: int) -> float:
    """R^2 of a least-squares polynomial force law of the given degree."""
    lam, force = _as_samples(samples)
    design = np.vander(lam, degree + 1)
    coeffs, *_ = np.linalg.lstsq(design, force, rcond=None)
    return _r2(force, design @ coeffs)


def compare_fit_orders(samples: SampleArray) -> Dict[int, float]:
    """R^2 of linear, quadratic and cubic fits."""
    return {degree: polynomial_r2(samples, degree) for degree in (1, 2, 3)}


def fit_stiffness(samples: SampleArray) -> StiffnessModel:
    """Least-squares quadratic force law.

    Args:
        samples: (lambda_z mm, F_c N) pairs, at least 10, spanning a nonzero range.

    Raises:
        DomainError: Too few samples.
        DegenerateFitError: Rank-deficient design (e.g. all lambda equal).
        NonPhysicalStiffnessError: k_d <= 0 somewhere in the fitted range.
    """
    lam, force = _as_samples(samples)
    if lam.size < MIN_SAMPLES:
        raise DomainError(f"Need at least {MIN_SAMPLES} samples, got {lam.size}")
    if np.ptp(lam) <= 0:
        raise DegenerateFitError("All indentation samples are equal")
    design = np.vander(lam, 3)
    coeffs, _, rank, _ = np.linalg.lstsq(design, force, rcond=None)
    if rank < 3:
        raise DegenerateFitError(f"Quadratic design matrix has rank {rank}")
    c1, c2, c3 = (float(c) for c in coeffs)
    lo, hi = float(lam.min()), float(lam.max())
    for edge in (lo, hi):
        if 2.0 * c1 * edge + c2 <= 0:
            raise NonPhysicalStiffnessError("Fitted dynamic stiffness is not positive", edge)
    model = StiffnessModel(
        c1=c1,
        c2=c2,
        c3=c3,
        fit_r2=_r2(force, design @ coeffs),
        sample_count=lam.size,
        lambda_min=lo,
        lambda_max=hi,
    )
    logger.info("Fitted %r", model)
    return model


def dynamic_stiffness(m: StiffnessModel, lambda_z):
    """k_d = 2*c1*lambda_z + c2 (N/mm)."""
    return m.dynamic_stiffness(lambda_z)


def indentation_for_force(m: StiffnessModel, force):
    """Indentation (mm) at which the force law reaches ``force``."""
    return m.indentation_for_force(force)


def contact_reference_index(forces: np.ndarray, threshold: float = CONTACT_THRESHOLD_N) -> int:
    """Index of the last frame at or below ``threshold`` before the force first exceeds it.

    Raises:
        DomainError: If the force never exceeds the threshold.
    """
    above = np.flatnonzero(np.asarray(forces) > threshold)
    if above.size == 0:
        raise DomainError(f"Force never exceeds the {threshold} N contact threshold")
    return max(int(above[0]) - 1, 0)


def indentation_samples(
    rec: SweepRecording, contact_threshold: float = CONTACT_THRESHOLD_N
) -> np.ndarray:
    """(lambda_z, F_c) pairs of a palpation, from contact onset onwards.

    lambda_z is the probe displacement along the force direction relative to the
    contact reference frame.
    """
    forces = rec.forces
    ref = contact_reference_index(forces, contact_threshold)
    origin = rec.frames[ref].pose.translation
    direction = rec.frames[ref].pose.force_direction
    lam = (rec.translations[ref:] - origin) @ direction
    return np.column_stack([lam, forces[ref:]])
