"""Sparse pyramidal Lucas-Kanade tracking between the zero-force frame and compressed frames."""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
import pandas as pd

from uscomp.calibration import PixelCoord
from uscomp.exceptions import DomainError, NoFeaturesError
from uscomp.serializable import Serializable, register_serializable

logger = logging.getLogger(__name__)

TRACKED = "tracked"
LOST = "lost"


@register_serializable
class LKParams(Serializable):
    """Tracker and corner-detector settings."""

    def __init__(
        self,
        window: int = 15,
        levels: int = 3,
        max_iterations: int = 30,
        epsilon: float = 0.01,
        min_eigen_threshold: float = 1e-4,
        max_residual: float = 30.0,
        quality_level: float = 0.01,
        min_distance: float = 8.0,
        block_size: int = 7,
    ):
        super().__init__()
        self.window = int(window)
        self.levels = int(levels)
        self.max_iterations = int(max_iterations)
        self.epsilon = float(epsilon)
        self.min_eigen_threshold = float(min_eigen_threshold)
        self.max_residual = float(max_residual)
        self.quality_level = float(quality_level)
        self.min_distance = float(min_distance)
        self.block_size = int(block_size)
        self.add_serializable_fields(
            [
                "window",
                "levels",
                "max_iterations",
                "epsilon",
                "min_eigen_threshold",
                "max_residual",
                "quality_level",
                "min_distance",
                "block_size",
            ]
        )

    @property
    def half_window(self) -> int:
        return self.window // 2

    @property
    def search_bound(self) -> float:
        """Largest displacement the pyramid can recover, px."""
        return float(self.half_window * (2**self.levels - 1))

    def cv_kwargs(self) -> dict:
        return dict(
            winSize=(self.window, self.window),
            maxLevel=self.levels - 1,
            criteria=(
                cv2.TERM_CRITERIA_COUNT | cv2.TERM_CRITERIA_EPS,
                self.max_iterations,
                self.epsilon,
            ),
            minEigThreshold=self.min_eigen_threshold,
        )


@dataclass
class TrackedPoint:
    """Displacement of one feature relative to its reference position."""

    ref_pixel: PixelCoord
    displacement: Optional[Tuple[float, float]]
    status: str
    residual: float

    @property
    def tracked(self) -> bool:
        return self.status == TRACKED


def _as_uint8(image) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(img)


def select_features(
    ref_image, n_points: int, params: LKParams = None, margin: Optional[int] = None
) -> List[PixelCoord]:
    """Shi-Tomasi corners ranked by strength, at least ``min_distance`` apart.

    Raises:
        DomainError: If ``n_points`` < 8.
        NoFeaturesError: If the image has no trackable texture.
    """
    params = params or LKParams()
    if n_points < 8:
        raise DomainError(f"Need at least 8 features, asked for {n_points}")
    img = _as_uint8(ref_image)
    margin = params.half_window + 1 if margin is None else int(margin)
    mask = np.zeros(img.shape, dtype=np.uint8)
    mask[margin : img.shape[0] - margin, margin : img.shape[1] - margin] = 255
    corners = cv2.goodFeaturesToTrack(
        img,
        maxCorners=n_points,
        qualityLevel=params.quality_level,
        minDistance=params.min_distance,
        mask=mask,
        blockSize=params.block_size,
    )
    if corners is None or len(corners) == 0:
        raise NoFeaturesError("No trackable features in reference image")
    return [PixelCoord(float(x), float(y)) for x, y in corners.reshape(-1, 2)]


def _lk_step(prev: np.ndarray, nxt: np.ndarray, pts: np.ndarray, params: LKParams):
    new_pts, status, err = cv2.calcOpticalFlowPyrLK(
        prev, nxt, pts.reshape(-1, 1, 2).astype(np.float32), None, **params.cv_kwargs()
    )
    new_pts = new_pts.reshape(-1, 2).astype(np.float64)
    ok = status.reshape(-1).astype(bool)
    residual = err.reshape(-1).astype(np.float64)
    ok &= residual <= params.max_residual
    h, w = prev.shape
    hw = params.half_window
    ok &= (
        (new_pts[:, 0] >= hw)
        & (new_pts[:, 0] <= w - 1 - hw)
        & (new_pts[:, 1] >= hw)
        & (new_pts[:, 1] <= h - 1 - hw)
    )
    return new_pts, ok, residual


def _check_points(points: np.ndarray, shape, params: LKParams) -> None:
    h, w = shape
    hw = params.half_window
    inside = (
        (points[:, 0] >= hw)
        & (points[:, 0] <= w - 1 - hw)
        & (points[:, 1] >= hw)
        & (points[:, 1] <= h - 1 - hw)
    )
    if not np.all(inside):
        raise DomainError(f"Tracked points must keep a {hw} px margin from the border")


def track(ref_image, cur_image, points: Sequence[PixelCoord], params: LKParams = None) -> List[TrackedPoint]:
    """Track ``points`` from ``ref_image`` into ``cur_image``.

    Raises:
        DomainError: On mismatched image sizes or points too close to the border.
    """
    params = params or LKParams()
    ref = _as_uint8(ref_image)
    cur = _as_uint8(cur_image)
    if ref.shape != cur.shape:
        raise DomainError(f"Image sizes differ: {ref.shape} vs {cur.shape}")
    start = np.array([[p[0], p[1]] for p in points], dtype=np.float64).reshape(-1, 2)
    _check_points(start, ref.shape, params)
    new_pts, ok, residual = _lk_step(ref, cur, start, params)
    disp = new_pts - start
    ok &= np.hypot(disp[:, 0], disp[:, 1]) <= params.search_bound
    return [
        TrackedPoint(
            PixelCoord(float(p[0]), float(p[1])),
            (float(d[0]), float(d[1])) if good else None,
            TRACKED if good else LOST,
            float(r),
        )
        for p, d, good, r in zip(start, disp, ok, residual)
    ]


def track_sequence(
    images: Sequence[np.ndarray], points: Sequence[PixelCoord], params: LKParams = None
) -> List[List[TrackedPoint]]:
    """Chain tracking frame to frame and report displacements relative to ``images[0]``.

    A point lost at any step stays lost for the rest of the sequence.
    """
    params = params or LKParams()
    frames = [_as_uint8(img) for img in images]
    start = np.array([[p[0], p[1]] for p in points], dtype=np.float64).reshape(-1, 2)
    _check_points(start, frames[0].shape, params)
    current = start.copy()
    alive = np.ones(len(start), dtype=bool)
    residual = np.zeros(len(start))
    result = [_snapshot(start, current, alive, residual)]
    for prev, nxt in zip(frames[:-1], frames[1:]):
        if prev.shape != nxt.shape:
            raise DomainError("All frames of a sequence must share dimensions")
        idx = np.flatnonzero(alive)
        if idx.size:
            new_pts, ok, res = _lk_step(prev, nxt, current[idx], params)
            current[idx] = new_pts
            residual[idx] = res
            alive[idx[~ok]] = False
            total = current - start
            alive &= np.hypot(total[:, 0], total[:, 1]) <= params.search_bound * len(frames)
        result.append(_snapshot(start, current, alive, residual))
    logger.info(
        "Tracked %d features over %d frames, %d survived", len(start), len(frames), int(alive.sum())
    )
    return result


def _snapshot(start, current, alive, residual) -> List[TrackedPoint]:
    disp = current - start
    return [
        TrackedPoint(
            PixelCoord(float(p[0]), float(p[1])),
            (float(d[0]), float(d[1])) if a else None,
            TRACKED if a else LOST,
            float(r),
        )
        for p, d, a, r in zip(start, disp, alive, residual)
    ]


def tracks_table(tracks_per_frame: Sequence[Sequence[TrackedPoint]]) -> pd.DataFrame:
    """Flatten per-frame tracks into a table for inspection."""
    rows = []
    for frame, tracks in enumerate(tracks_per_frame):
        for point, t in enumerate(tracks):
            dx, dy = t.displacement if t.displacement is not None else (np.nan, np.nan)
            rows.append(
                {
                    "frame": frame,
                    "point": point,
                    "x": t.ref_pixel.x,
                    "y": t.ref_pixel.y,
                    "dx": dx,
                    "dy": dy,
                    "status": t.status,
                    "residual": t.residual,
                }
            )
    return pd.DataFrame(rows)
