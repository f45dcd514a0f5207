"""Synthetic phantom: ground-truth force laws, vessel geometry and B-mode frames.

The forward deformation is an exponential-decay compression with a lateral
bulge. It is deliberately outside the quadratic family the regression fits,
so the simulator acts as an independent oracle.

World frame: x lateral, y along the sweep (elevational), z depth. The tissue
surface is the plane z = 0 and the probe presses along +z.
"""

import logging
from functools import lru_cache
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from uscomp.calibration import CalibrationParams, Pose
from uscomp.exceptions import DomainError, ValidationError
from uscomp.io import Frame, RecordingManifest, SweepRecording
from uscomp.serializable import Serializable, register_serializable
from uscomp.stiffness import StiffnessModel

logger = logging.getLogger(__name__)

FRAME_PERIOD_S = 0.02
MIN_PALPATION_STEPS = 10
INVERSION_ITERATIONS = 40
TISSUE_MEAN = 0.55
TISSUE_CONTRAST = 0.16


@register_serializable
class PhantomSpec(Serializable):
    """Ground truth of a synthetic phantom.

    ``stiffness_knots`` rows are ``[s_mm, c1, c2, c3]``; coefficients are
    interpolated linearly along the trajectory and held constant beyond the end
    knots.
    """

    def __init__(
        self,
        phantom_id: str = "stiff",
        length_mm: float = 40.0,
        stiffness_knots: Sequence[Sequence[float]] = ((0.0, 0.0104, 3.141, 0.0),),
        vessel_lateral_mm: float = 0.0,
        vessel_depth_mm: float = 20.0,
        vessel_depth_slope: float = 0.0,
        vessel_radius_mm: float = 8.444,
        vessel_radius_slope: float = 0.0,
        layer_thickness_mm: float = 50.0,
        decay_depth_mm: float = 250.0,
        incompressibility: float = 0.03,
        speckle_sigma: float = 0.15,
        force_noise_n: float = 0.0,
        texture_seed: int = 0,
        texture_correlation_px: float = 1.5,
        lumen_intensity: float = 0.12,
    ):
        super().__init__()
        self.phantom_id = phantom_id
        self.length_mm = float(length_mm)
        self.stiffness_knots = [[float(v) for v in row] for row in stiffness_knots]
        self.vessel_lateral_mm = float(vessel_lateral_mm)
        self.vessel_depth_mm = float(vessel_depth_mm)
        self.vessel_depth_slope = float(vessel_depth_slope)
        self.vessel_radius_mm = float(vessel_radius_mm)
        self.vessel_radius_slope = float(vessel_radius_slope)
        self.layer_thickness_mm = float(layer_thickness_mm)
        self.decay_depth_mm = float(decay_depth_mm)
        self.incompressibility = float(incompressibility)
        self.speckle_sigma = float(speckle_sigma)
        self.force_noise_n = float(force_noise_n)
        self.texture_seed = int(texture_seed)
        self.texture_correlation_px = float(texture_correlation_px)
        self.lumen_intensity = float(lumen_intensity)
        self.add_serializable_fields(
            [
                "phantom_id",
                "length_mm",
                "stiffness_knots",
                "vessel_lateral_mm",
                "vessel_depth_mm",
                "vessel_depth_slope",
                "vessel_radius_mm",
                "vessel_radius_slope",
                "layer_thickness_mm",
                "decay_depth_mm",
                "incompressibility",
                "speckle_sigma",
                "force_noise_n",
                "texture_seed",
                "texture_correlation_px",
                "lumen_intensity",
            ]
        )
        self.validate()

    @classmethod
    def stiff(cls, **overrides) -> "PhantomSpec":
        """Near-linear phantom, mean k_d about 3237 N/m over a 0-30 N ramp."""
        params = dict(phantom_id="stiff", length_mm=40.0, stiffness_knots=[[0.0, 0.0104, 3.141, 0.0]])
        params.update(overrides)
        return cls(**params)

    @classmethod
    def soft(cls, **overrides) -> "PhantomSpec":
        """Strongly nonlinear phantom, mean k_d about 1.5e3 N/m over a 0-16 N ramp."""
        params = dict(phantom_id="soft", length_mm=60.0, stiffness_knots=[[0.0, 0.075, 0.2, 0.0]])
        params.update(overrides)
        return cls(**params)

    def validate(self) -> None:
        if not self.stiffness_knots:
            raise ValidationError("Phantom needs at least one stiffness knot", self)
        knots = np.asarray(self.stiffness_knots)
        if knots.ndim != 2 or knots.shape[1] != 4:
            raise ValidationError("Stiffness knots are rows of [s, c1, c2, c3]", self)
        if np.any(np.diff(knots[:, 0]) <= 0):
            raise ValidationError("Stiffness knot positions must increase", self)
        if np.any(knots[:, 1] < 0) or np.any(knots[:, 2] <= 0):
            raise ValidationError("Force laws need c1 >= 0 and c2 > 0", self)
        if self.length_mm <= 0 or self.layer_thickness_mm <= 0 or self.decay_depth_mm <= 0:
            raise ValidationError("Lengths must be positive", self)
        ends = (self.vessel_radius_mm, self.vessel_radius(self.length_mm))
        if min(ends) <= 0:
            raise ValidationError("Vessel radius must stay positive", self)

    def check_position(self, s: float) -> None:
        if not 0.0 <= s <= self.length_mm:
            raise DomainError(f"Position {s} mm outside phantom [0, {self.length_mm}]")

    def coefficients_at(self, s: float) -> Tuple[float, float, float]:
        knots = np.asarray(self.stiffness_knots)
        return tuple(float(np.interp(s, knots[:, 0], knots[:, i])) for i in (1, 2, 3))

    def ground_truth_model(self, s: float) -> StiffnessModel:
        c1, c2, c3 = self.coefficients_at(s)
        return StiffnessModel(c1=c1, c2=c2, c3=c3)

    def vessel_center(self, s: float) -> Tuple[float, float]:
        """(lateral, depth) of the vessel centreline at position ``s``, mm."""
        return self.vessel_lateral_mm, self.vessel_depth_mm + self.vessel_depth_slope * s

    def vessel_radius(self, s: float) -> float:
        return self.vessel_radius_mm + self.vessel_radius_slope * s


@register_serializable
class ForwardDeformation(Serializable):
    """Ground-truth in-plane displacement for one indentation.

    The tissue at depth Z moves down by lambda_z * g(Z) with g decaying from 1
    at the surface; seen from the probe, content moves toward the transducer by
    lambda_z * (1 - g(Z)), pinned so that the image bottom moves by
    lambda_z * D_I / L_T. A lateral bulge proportional to the lateral offset
    vanishes at the surface.
    """

    def __init__(
        self,
        indentation_mm: float = 0.0,
        decay_depth_mm: float = 250.0,
        incompressibility: float = 0.03,
        layer_thickness_mm: float = 50.0,
    ):
        super().__init__()
        self.indentation_mm = float(indentation_mm)
        self.decay_depth_mm = float(decay_depth_mm)
        self.incompressibility = float(incompressibility)
        self.layer_thickness_mm = float(layer_thickness_mm)
        self.add_serializable_fields(
            ["indentation_mm", "decay_depth_mm", "incompressibility", "layer_thickness_mm"]
        )

    @classmethod
    def for_phantom(cls, spec: PhantomSpec, indentation_mm: float) -> "ForwardDeformation":
        return cls(
            indentation_mm=indentation_mm,
            decay_depth_mm=spec.decay_depth_mm,
            incompressibility=spec.incompressibility,
            layer_thickness_mm=spec.layer_thickness_mm,
        )

    def displacement_mm(self, lateral, depth, cal: CalibrationParams):
        """Probe-frame displacement (lateral, depth) in mm of tissue at reference (lateral, depth)."""
        lam = self.indentation_mm
        delta = self.decay_depth_mm
        z = np.asarray(depth, dtype=np.float64)
        z_bottom = cal.depth_mm + cal.offset_mm
        profile = -np.expm1(-z / delta) / -np.expm1(-z_bottom / delta)
        u_depth = -lam * (cal.depth_mm / self.layer_thickness_mm) * profile
        bulge = np.e * (z / delta) * np.exp(-z / delta)
        u_lat = (
            self.incompressibility * lam * (np.asarray(lateral) / (cal.element_length_mm / 2.0)) * bulge
        )
        return u_lat, u_depth

    def displacement_px(self, xs, ys, cal: CalibrationParams):
        """Displacement (d_x, d_y) in pixels of content at reference pixel (xs, ys)."""
        lateral = np.asarray(xs, dtype=np.float64) * cal.lateral_scale - cal.element_length_mm / 2.0
        depth = np.asarray(ys, dtype=np.float64) * cal.axial_scale + cal.offset_mm
        u_lat, u_depth = self.displacement_mm(lateral, depth, cal)
        return u_lat / cal.lateral_scale, u_depth / cal.axial_scale

    def field(self, cal: CalibrationParams):
        """Dense (d_x, d_y) on the reference pixel grid."""
        ys, xs = np.mgrid[0 : cal.image_width, 0 : cal.image_length].astype(np.float64)
        return self.displacement_px(xs, ys, cal)

    def reference_of(self, xs, ys, cal: CalibrationParams):
        """Reference coordinates of content seen at deformed pixel (xs, ys)."""
        x_def = np.asarray(xs, dtype=np.float64)
        y_def = np.asarray(ys, dtype=np.float64)
        x_ref, y_ref = x_def.copy(), y_def.copy()
        if self.indentation_mm == 0.0:
            return x_ref, y_ref
        for _ in range(INVERSION_ITERATIONS):
            dx, dy = self.displacement_px(x_ref, y_ref, cal)
            x_ref = x_def - dx
            y_ref = y_def - dy
        return x_ref, y_ref


@lru_cache(maxsize=8)
def _texture(seed: int, rows: int, cols: int, correlation_px: float) -> np.ndarray:
    rng = np.random.default_rng(seed)
    noise = ndimage.gaussian_filter(rng.standard_normal((rows, cols)), correlation_px)
    noise = (noise - noise.mean()) / noise.std()
    noise.setflags(write=False)
    return noise


class PhantomRenderer:
    """Renders zero-force templates and deformed frames of a phantom."""

    def __init__(self, spec: PhantomSpec, cal: CalibrationParams):
        self.spec = spec
        self.cal = cal
        self.pad_lateral = cal.image_length // 2
        self.pad_bottom = cal.image_width
        base = _texture(
            spec.texture_seed,
            cal.image_width + self.pad_bottom + 1,
            cal.image_length + 2 * self.pad_lateral,
            spec.texture_correlation_px,
        )
        speckle = _texture(
            spec.texture_seed + 7919,
            base.shape[0],
            base.shape[1],
            0.7,
        )
        tissue = TISSUE_MEAN + TISSUE_CONTRAST * base
        self._tissue = np.clip(tissue * (1.0 + spec.speckle_sigma * speckle), 0.02, 0.98)

    def intensity(self, x_ref, y_ref, s: float) -> np.ndarray:
        """Zero-force intensity in [0, 1] at reference pixel coordinates."""
        cal, spec = self.cal, self.spec
        coords = np.array([np.asarray(y_ref), np.asarray(x_ref) + self.pad_lateral])
        tissue = ndimage.map_coordinates(self._tissue, coords, order=1, mode="nearest")
        lateral = np.asarray(x_ref) * cal.lateral_scale - cal.element_length_mm / 2.0
        depth = np.asarray(y_ref) * cal.axial_scale + cal.offset_mm
        c_lat, c_depth = spec.vessel_center(s)
        dist = np.hypot(lateral - c_lat, depth - c_depth)
        edge = 0.5 * min(cal.lateral_scale, cal.axial_scale)
        inside = np.clip((spec.vessel_radius(s) - dist) / (2.0 * edge) + 0.5, 0.0, 1.0)
        return tissue * (1.0 - (1.0 - spec.lumen_intensity) * inside)

    def render(self, s: float, indentation_mm: float) -> np.ndarray:
        """8-bit frame at position ``s`` with the probe indented by ``indentation_mm``."""
        ys, xs = np.mgrid[0 : self.cal.image_width, 0 : self.cal.image_length].astype(np.float64)
        deformation = ForwardDeformation.for_phantom(self.spec, indentation_mm)
        x_ref, y_ref = deformation.reference_of(xs, ys, self.cal)
        values = self.intensity(x_ref, y_ref, s)
        return np.clip(np.rint(255.0 * values), 0, 255).astype(np.uint8)

    def template(self, s: float) -> np.ndarray:
        return self.render(s, 0.0)


def _probe_pose(s: float, indentation_mm: float, lateral_mm: float = 0.0) -> Pose:
    return Pose(np.eye(3), [lateral_mm, s, indentation_mm])


def _measured_forces(spec: PhantomSpec, forces: np.ndarray, seed: int) -> np.ndarray:
    if spec.force_noise_n <= 0:
        return forces
    rng = np.random.default_rng([spec.texture_seed, seed, 1])
    return np.clip(forces + rng.normal(0.0, spec.force_noise_n, forces.shape), 0.0, None)


def simulate_palpation(
    spec: PhantomSpec,
    position: float,
    f_max: float,
    n_steps: int,
    cal: CalibrationParams = None,
    seed: int = 0,
) -> SweepRecording:
    """Quasi-static palpation: force ramps 0 -> f_max at a fixed position.

    Raises:
        DomainError: Position outside the phantom, f_max < 0 or n_steps < 10.
    """
    cal = cal if cal is not None else CalibrationParams()
    spec.check_position(position)
    if f_max < 0:
        raise DomainError(f"f_max must be non-negative, got {f_max}")
    if n_steps < MIN_PALPATION_STEPS:
        raise DomainError(f"Palpation needs at least {MIN_PALPATION_STEPS} steps")
    law = spec.ground_truth_model(position)
    forces = np.linspace(0.0, f_max, n_steps)
    indentations = np.atleast_1d(law.indentation_clamped(forces))
    measured = _measured_forces(spec, forces, seed)
    renderer = PhantomRenderer(spec, cal)
    frames = [
        Frame(
            renderer.render(position, float(lam)),
            float(force),
            _probe_pose(position, float(lam)),
            i * FRAME_PERIOD_S,
        )
        for i, (lam, force) in enumerate(zip(indentations, measured))
    ]
    manifest = RecordingManifest(
        calibration=cal,
        phantom_id=spec.phantom_id,
        kind="palpation",
        acquisition={"position_mm": float(position), "f_max": float(f_max), "seed": int(seed)},
    )
    logger.info(
        "Simulated palpation at %.2f mm: %d steps, max indentation %.3f mm",
        position,
        n_steps,
        float(indentations[-1]),
    )
    return SweepRecording(manifest, frames)


def sweep_positions(start: float, path_length: float, n_frames: int) -> np.ndarray:
    return start + np.linspace(0.0, path_length, n_frames)


def simulate_sweep(
    spec: PhantomSpec,
    f_c: float,
    path_length: float,
    n_frames: int,
    cal: CalibrationParams = None,
    start: float = 0.0,
    seed: int = 0,
) -> SweepRecording:
    """Constant-force sweep; poses advance along +y and press in by the local lambda_z.

    Raises:
        DomainError: Negative force, fewer than 2 frames or a path leaving the phantom.
    """
    cal = cal if cal is not None else CalibrationParams()
    if f_c < 0:
        raise DomainError(f"Contact force must be non-negative, got {f_c}")
    if n_frames < 2 or path_length <= 0:
        raise DomainError("A sweep needs at least 2 frames over a positive path length")
    positions = sweep_positions(start, path_length, n_frames)
    spec.check_position(float(positions[0]))
    spec.check_position(float(positions[-1]))
    renderer = PhantomRenderer(spec, cal)
    measured = _measured_forces(spec, np.full(n_frames, float(f_c)), seed)
    frames: List[Frame] = []
    for i, s in enumerate(positions):
        lam = float(spec.ground_truth_model(float(s)).indentation_clamped(f_c))
        frames.append(
            Frame(renderer.render(float(s), lam), measured[i], _probe_pose(float(s), lam), i * FRAME_PERIOD_S)
        )
    manifest = RecordingManifest(
        calibration=cal,
        phantom_id=spec.phantom_id,
        kind="sweep",
        acquisition={
            "f_c": float(f_c),
            "start_mm": float(start),
            "path_length_mm": float(path_length),
            "seed": int(seed),
        },
    )
    logger.info("Simulated %d-frame sweep at %.2f N", n_frames, f_c)
    return SweepRecording(manifest, frames)
