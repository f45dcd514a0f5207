"""Coupled second-order pixel displacement regression.

The displacement of content at reference pixel (x, y) under contact force F is

    D(x, y, F) = K . (M(x, y, H(F)) - M(x, y, 0))

with M the ten-term quadratic basis in normalized (x, y, h) and H(F) the load
variable accumulated over small force intervals, each of which sees the local
dynamic stiffness as constant::

    H(F) = sum_i dF / k_d(lambda(F_i_mid))

For constant stiffness H = F / k_d, and since dF = k_d * dlambda, H tracks the
indentation itself. Basis terms without h cancel in the difference, so D(0) is
exactly zero.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from uscomp.exceptions import DivergenceError, DomainError, NonPhysicalStiffnessError, ValidationError
from uscomp.io import SweepRecording
from uscomp.optical_flow import TrackedPoint
from uscomp.serializable import Serializable, register_serializable
from uscomp.stiffness import (
    CONTACT_THRESHOLD_N,
    StiffnessModel,
    contact_reference_index,
    indentation_samples,
)

logger = logging.getLogger(__name__)

BASIS_TERMS = ("x2", "y2", "h2", "xy", "xh", "yh", "x", "y", "h", "1")
LOAD_TERMS = (2, 4, 5, 8)
CLAMP_LIMIT = 1.2
MIN_FORCE_LEVELS = 5
FLOW = "flow"
BOUNDARY = "boundary"


def basis(x, y, h) -> np.ndarray:
    """[x^2, y^2, h^2, xy, xh, yh, x, y, h, 1] stacked along the last axis."""
    x, y, h = np.broadcast_arrays(
        np.asarray(x, dtype=np.float64),
        np.asarray(y, dtype=np.float64),
        np.asarray(h, dtype=np.float64),
    )
    one = np.ones_like(x)
    return np.stack([x * x, y * y, h * h, x * y, x * h, y * h, x, y, h, one], axis=-1)


@register_serializable
class DisplacementRegression(Serializable):
    """Fitted K^x, K^y plus the scales used to normalize inputs and outputs.

    Attributes:
        kx, ky: ten coefficients each, ordered as ``BASIS_TERMS``.
        x_scale, y_scale: image length and width in pixels.
        h_scale: largest training load, mm.
        dx_scale, dy_scale: largest absolute training displacement component, px,
            one value shared by both axes.
        stiffness: force law of the training position.
        layer_thickness_mm: L_T used for the boundary constraint.
    """

    array_fields = ("kx", "ky")

    def __init__(
        self,
        kx=None,
        ky=None,
        x_scale: float = 1.0,
        y_scale: float = 1.0,
        h_scale: float = 1.0,
        dx_scale: float = 1.0,
        dy_scale: float = 1.0,
        n_force_intervals: int = 64,
        final_loss: float = 0.0,
        iterations: int = 0,
        stiffness: Optional[StiffnessModel] = None,
        layer_thickness_mm: float = 50.0,
    ):
        super().__init__()
        self.kx = np.zeros(10) if kx is None else np.asarray(kx, dtype=np.float64)
        self.ky = np.zeros(10) if ky is None else np.asarray(ky, dtype=np.float64)
        self.x_scale = float(x_scale)
        self.y_scale = float(y_scale)
        self.h_scale = float(h_scale)
        self.dx_scale = float(dx_scale)
        self.dy_scale = float(dy_scale)
        self.n_force_intervals = int(n_force_intervals)
        self.final_loss = float(final_loss)
        self.iterations = int(iterations)
        self.stiffness = stiffness if stiffness is not None else StiffnessModel()
        self.layer_thickness_mm = float(layer_thickness_mm)
        self.add_serializable_fields(
            [
                "kx",
                "ky",
                "x_scale",
                "y_scale",
                "h_scale",
                "dx_scale",
                "dy_scale",
                "n_force_intervals",
                "final_loss",
                "iterations",
                "stiffness",
                "layer_thickness_mm",
            ]
        )
        self.validate()

    def validate(self) -> None:
        if self.kx.shape != (10,) or self.ky.shape != (10,):
            raise ValidationError("K^x and K^y need 10 coefficients each", self)
        if min(self.norms) <= 0:
            raise ValidationError("Normalization scales must be positive", self)
        if self.n_force_intervals < 1:
            raise ValidationError("At least one force interval is needed", self)

    @property
    def norms(self) -> Tuple[float, float, float, float, float]:
        return (self.x_scale, self.y_scale, self.h_scale, self.dx_scale, self.dy_scale)

    @property
    def coefficients(self) -> np.ndarray:
        """(2, 10) array with K^x and K^y as rows."""
        return np.vstack([self.kx, self.ky])

    def _normalized_inputs(self, x, y, h):
        xn = np.asarray(x, dtype=np.float64) / self.x_scale
        yn = np.asarray(y, dtype=np.float64) / self.y_scale
        hn = np.asarray(h, dtype=np.float64) / self.h_scale
        out = []
        for name, value in (("x", xn), ("y", yn), ("h", hn)):
            if np.any(value < 0.0) or np.any(value > CLAMP_LIMIT):
                logger.warning(
                    "Normalized %s outside [0, %.1f]; clamping (range %.3g..%.3g)",
                    name,
                    CLAMP_LIMIT,
                    float(np.min(value)),
                    float(np.max(value)),
                )
                value = np.clip(value, 0.0, CLAMP_LIMIT)
            out.append(value)
        return out

    def displacement_at_load(self, x, y, load) -> Tuple[np.ndarray, np.ndarray]:
        """Displacement (px) of reference pixels (x, y) at accumulated load ``load`` (mm)."""
        xn, yn, hn = self._normalized_inputs(x, y, load)
        diff = basis(xn, yn, hn) - basis(xn, yn, np.zeros_like(hn))
        return self.dx_scale * (diff @ self.kx), self.dy_scale * (diff @ self.ky)

    def __repr__(self) -> str:
        return (
            f"DisplacementRegression(loss={self.final_loss:.3g}, "
            f"intervals={self.n_force_intervals}, h_scale={self.h_scale:.4g})"
        )


def cumulative_load(stiffness: StiffnessModel, force: float, n_intervals: int = 64) -> float:
    """Accumulate dF / k_d over ``n_intervals`` equal force steps with midpoint stiffness.

    Raises:
        DomainError: If ``force`` is negative.
        NonPhysicalStiffnessError: If k_d <= 0 at any step.
    """
    force = float(force)
    if force < 0:
        raise DomainError(f"Contact force must be non-negative, got {force}")
    if force == 0.0:
        return 0.0
    step = force / n_intervals
    mids = (np.arange(n_intervals) + 0.5) * step
    k = stiffness.dynamic_stiffness(stiffness.indentation_clamped(mids))
    if np.any(k <= 0):
        raise NonPhysicalStiffnessError("Dynamic stiffness is not positive along the load path")
    return float(np.sum(step / k))


def eval_increment(reg: DisplacementRegression, x, y, force: float, k_d: float):
    """Single-shot displacement (px) at h = F / k_d, evaluated as [K^x; K^y] . M(x, y, h).

    Raises:
        NonPhysicalStiffnessError: If ``k_d`` <= 0.
    """
    if k_d <= 0:
        raise NonPhysicalStiffnessError(f"Dynamic stiffness must be positive, got {k_d}")
    xn, yn, hn = reg._normalized_inputs(x, y, float(force) / float(k_d))
    m = basis(xn, yn, hn)
    return reg.dx_scale * (m @ reg.kx), reg.dy_scale * (m @ reg.ky)


def eval_cumulative(reg: DisplacementRegression, x, y, force: float, stiffness: StiffnessModel):
    """Total displacement (px) of reference pixels under contact force ``force``."""
    load = cumulative_load(stiffness, force, reg.n_force_intervals)
    return reg.displacement_at_load(x, y, load)


@dataclass
class TrainingSet:
    """Samples pooled over the force levels of one palpation.

    Per-sample arrays share one index; ``level`` points into the per-level arrays.
    """

    x: np.ndarray
    y: np.ndarray
    force: np.ndarray
    load: np.ndarray
    k_d: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    kind: np.ndarray
    level: np.ndarray
    level_forces: np.ndarray
    level_lambdas: np.ndarray
    level_loads: np.ndarray
    image_length: int
    image_width: int
    layer_thickness_mm: float
    stiffness: StiffnessModel
    n_force_intervals: int = 64
    boundary_rows: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.x.size)

    @property
    def n_levels(self) -> int:
        return int(self.level_forces.size)

    @property
    def n_flow(self) -> int:
        return int(np.count_nonzero(self.kind == FLOW))

    @property
    def n_boundary(self) -> int:
        return int(np.count_nonzero(self.kind == BOUNDARY))

    def samples_per_level(self) -> np.ndarray:
        return np.bincount(self.level, minlength=self.n_levels)

    def norms(self) -> Tuple[float, float, float, float, float]:
        h_scale = float(np.max(self.level_loads))
        if h_scale <= 0:
            raise DomainError("Palpation never loads the tissue")
        d_scale = float(max(np.max(np.abs(self.dx)), np.max(np.abs(self.dy)))) or 1.0
        return (float(self.image_length), float(self.image_width), h_scale, d_scale, d_scale)

    def design(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Normalized load-term design matrix and normalized targets."""
        xs, ys, hs, dxs, dys = self.norms()
        m = basis(self.x / xs, self.y / ys, self.load / hs)[:, LOAD_TERMS]
        return m, self.dx / dxs, self.dy / dys


def boundary_displacement(lambda_z: float, layer_thickness_mm: float, image_width: int) -> float:
    """Axial displacement (px) of the image bottom row: content rises by lambda_z / L_T of the depth."""
    return -(float(lambda_z) / float(layer_thickness_mm)) * float(image_width)


def build_training_set(
    palpation: SweepRecording,
    tracks: Sequence[Sequence[TrackedPoint]],
    stiffness: StiffnessModel,
    layer_thickness_mm: float,
    n_boundary: int = 64,
    n_force_intervals: int = 64,
    contact_threshold: float = CONTACT_THRESHOLD_N,
) -> TrainingSet:
    """Pool tracked flow and boundary samples of every loaded frame.

    ``tracks[i]`` holds displacements of frame ``i`` relative to frame 0. Frames
    before contact onset are skipped. Each level adds ``n_boundary`` samples,
    half on the top row with zero displacement and half on the bottom row with
    the compression-ratio displacement.

    Raises:
        DomainError: Misaligned tracks, L_T <= 0, or fewer than 5 force levels.
    """
    if layer_thickness_mm <= 0:
        raise DomainError(f"Layer thickness must be positive, got {layer_thickness_mm}")
    if len(tracks) != len(palpation):
        raise DomainError(
            f"Tracks cover {len(tracks)} frames but the palpation has {len(palpation)}"
        )
    if n_boundary < 2:
        raise DomainError("Need at least one boundary sample per row")
    cal = palpation.calibration
    ref = contact_reference_index(palpation.forces, contact_threshold)
    pairs = indentation_samples(palpation, contact_threshold)
    if pairs.shape[0] < MIN_FORCE_LEVELS:
        raise DomainError(f"Need at least {MIN_FORCE_LEVELS} force levels, got {pairs.shape[0]}")

    per_row = n_boundary // 2
    edge_x = np.linspace(0.0, float(cal.image_length), per_row)
    columns = {k: [] for k in ("x", "y", "force", "load", "k_d", "dx", "dy", "kind", "level")}
    level_loads = []

    def extend(level, xs, ys, dxs, dys, kind, force, load, k_d):
        n = len(xs)
        columns["x"].append(np.asarray(xs, dtype=np.float64))
        columns["y"].append(np.asarray(ys, dtype=np.float64))
        columns["dx"].append(np.asarray(dxs, dtype=np.float64))
        columns["dy"].append(np.asarray(dys, dtype=np.float64))
        columns["force"].append(np.full(n, force))
        columns["load"].append(np.full(n, load))
        columns["k_d"].append(np.full(n, k_d))
        columns["kind"].append(np.full(n, kind, dtype=object))
        columns["level"].append(np.full(n, level, dtype=np.int64))

    for level, (lam, force) in enumerate(pairs):
        frame_tracks = tracks[ref + level]
        load = cumulative_load(stiffness, force, n_force_intervals)
        k_d = float(stiffness.dynamic_stiffness(max(float(lam), 0.0)))
        level_loads.append(load)
        good = [t for t in frame_tracks if t.tracked]
        if good:
            extend(
                level,
                [t.ref_pixel.x for t in good],
                [t.ref_pixel.y for t in good],
                [t.displacement[0] for t in good],
                [t.displacement[1] for t in good],
                FLOW,
                force,
                load,
                k_d,
            )
        bottom = boundary_displacement(max(float(lam), 0.0), layer_thickness_mm, cal.image_width)
        extend(level, edge_x, np.zeros(per_row), np.zeros(per_row), np.zeros(per_row), BOUNDARY, force, load, k_d)
        extend(
            level,
            edge_x,
            np.full(per_row, float(cal.image_width)),
            np.zeros(per_row),
            np.full(per_row, bottom),
            BOUNDARY,
            force,
            load,
            k_d,
        )

    data = {k: np.concatenate(v) for k, v in columns.items()}
    ts = TrainingSet(
        x=data["x"],
        y=data["y"],
        force=data["force"],
        load=data["load"],
        k_d=data["k_d"],
        dx=data["dx"],
        dy=data["dy"],
        kind=data["kind"].astype(str),
        level=data["level"],
        level_forces=pairs[:, 1].copy(),
        level_lambdas=pairs[:, 0].copy(),
        level_loads=np.array(level_loads),
        image_length=cal.image_length,
        image_width=cal.image_width,
        layer_thickness_mm=float(layer_thickness_mm),
        stiffness=stiffness,
        n_force_intervals=n_force_intervals,
        boundary_rows=[0.0, float(cal.image_width)],
    )
    logger.info(
        "Training set: %d force levels, %d flow and %d boundary samples",
        ts.n_levels,
        ts.n_flow,
        ts.n_boundary,
    )
    return ts


@register_serializable
class RegressionOptions(Serializable):
    """ADAM settings; the fit stops early once the best loss stalls for ``patience`` iterations."""

    def __init__(
        self,
        step: float = 0.01,
        max_iters: int = 20000,
        seed: int = 0,
        patience: int = 200,
        tolerance: float = 1e-10,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        init_scale: float = 0.0,
        whiten: bool = True,
    ):
        super().__init__()
        self.step = float(step)
        self.max_iters = int(max_iters)
        self.seed = int(seed)
        self.patience = int(patience)
        self.tolerance = float(tolerance)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.init_scale = float(init_scale)
        self.whiten = bool(whiten)
        self.add_serializable_fields(
            [
                "step",
                "max_iters",
                "seed",
                "patience",
                "tolerance",
                "beta1",
                "beta2",
                "eps",
                "init_scale",
                "whiten",
            ]
        )
        self.validate()

    def validate(self) -> None:
        if self.step <= 0 or self.max_iters < 1 or self.patience < 1:
            raise ValidationError("ADAM step, iteration cap and patience must be positive", self)
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValidationError("ADAM betas must lie in [0, 1)", self)


def loss_and_gradient(params: np.ndarray, gram: np.ndarray, moments: np.ndarray, target_sq: float):
    """Mean squared error of a linear model from precomputed sufficient statistics.

    Args:
        params: (2, p) coefficients for the x and y outputs.
        gram: (p, p) matrix A^T A / N.
        moments: (2, p) rows A^T b / N for each output.
        target_sq: sum over outputs of b^T b / N.

    Returns:
        (loss, gradient) with gradient shaped like ``params``.
    """
    gk = params @ gram
    loss = float(np.sum(gk * params) - 2.0 * np.sum(moments * params) + target_sq)
    return max(loss, 0.0), 2.0 * (gk - moments)


def _expand(active: np.ndarray) -> np.ndarray:
    full = np.zeros(10)
    full[list(LOAD_TERMS)] = active
    return full


def _regression_from(ts: TrainingSet, active: np.ndarray, loss: float, iterations: int) -> DisplacementRegression:
    xs, ys, hs, dxs, dys = ts.norms()
    return DisplacementRegression(
        kx=_expand(active[0]),
        ky=_expand(active[1]),
        x_scale=xs,
        y_scale=ys,
        h_scale=hs,
        dx_scale=dxs,
        dy_scale=dys,
        n_force_intervals=ts.n_force_intervals,
        final_loss=loss,
        iterations=iterations,
        stiffness=ts.stiffness,
        layer_thickness_mm=ts.layer_thickness_mm,
    )


def _check_training_set(ts: TrainingSet) -> None:
    if len(ts) == 0:
        raise DomainError("Empty training set")
    if ts.n_flow == 0:
        logger.warning("No flow samples: regression is under-determined away from the boundary rows")


def fit_regression(ts: TrainingSet, opts: RegressionOptions = None) -> DisplacementRegression:
    """Minimize the mean squared displacement error with ADAM.

    With ``whiten`` set, ADAM runs on an orthonormalized copy of the design so the
    step size acts uniformly on every direction; the loss it minimizes is unchanged.

    Raises:
        DomainError: Empty training set.
        DivergenceError: If the loss becomes non-finite.
    """
    opts = opts or RegressionOptions()
    _check_training_set(ts)
    a, bx, by = ts.design()
    n = float(a.shape[0])
    targets = np.vstack([bx, by])
    if opts.whiten:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
        keep = s > s[0] * 1e-10
        to_params = vt[keep].T / s[keep]
        design = u[:, keep]
    else:
        to_params = np.eye(a.shape[1])
        design = a
    gram = design.T @ design / n
    moments = targets @ design / n
    target_sq = float(np.sum(targets * targets) / n)

    rng = np.random.default_rng(opts.seed)
    params = opts.init_scale * rng.standard_normal((2, design.shape[1]))
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    best_loss, _ = loss_and_gradient(params, gram, moments, target_sq)
    best = params.copy()
    best_at = 0
    trace: List[float] = []
    iteration = 0
    for iteration in range(1, opts.max_iters + 1):
        loss, grad = loss_and_gradient(params, gram, moments, target_sq)
        trace.append(loss)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise DivergenceError(iteration, trace[-20:])
        if loss < best_loss - opts.tolerance:
            best_loss, best, best_at = loss, params.copy(), iteration
        elif loss < best_loss:
            best_loss, best = loss, params.copy()
        if iteration - best_at >= opts.patience:
            break
        m = opts.beta1 * m + (1.0 - opts.beta1) * grad
        v = opts.beta2 * v + (1.0 - opts.beta2) * grad * grad
        m_hat = m / (1.0 - opts.beta1**iteration)
        v_hat = v / (1.0 - opts.beta2**iteration)
        params = params - opts.step * m_hat / (np.sqrt(v_hat) + opts.eps)
    active = best @ to_params.T
    logger.info("ADAM stopped after %d iterations, loss %.3g", iteration, best_loss)
    return _regression_from(ts, active, best_loss, iteration)


def solve_regression_lstsq(ts: TrainingSet) -> DisplacementRegression:
    """Closed-form least-squares minimizer of the same loss."""
    _check_training_set(ts)
    a, bx, by = ts.design()
    sol, *_ = np.linalg.lstsq(a, np.column_stack([bx, by]), rcond=None)
    active = sol.T
    residual = a @ sol - np.column_stack([bx, by])
    loss = float(np.sum(residual * residual) / a.shape[0])
    return _regression_from(ts, active, loss, 0)


def training_loss(reg: DisplacementRegression, ts: TrainingSet) -> float:
    """Mean squared error of ``reg`` on ``ts`` in the model's normalized units."""
    dx, dy = reg.displacement_at_load(ts.x, ts.y, ts.load)
    ex = (dx - ts.dx) / reg.dx_scale
    ey = (dy - ts.dy) / reg.dy_scale
    return float(np.mean(ex * ex + ey * ey))


def boundary_sensitivity(reg: DisplacementRegression, lambda_z: float, image_width: int):
    """Bottom-row displacement for 0.8, 1.0 and 1.2 times the configured L_T."""
    return {
        factor: boundary_displacement(lambda_z, factor * reg.layer_thickness_mm, image_width)
        for factor in (0.8, 1.0, 1.2)
    }
