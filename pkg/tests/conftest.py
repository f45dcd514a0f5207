"""
Pytest configuration and fixtures for uscomp tests
"""

import sys
from pathlib import Path

# Add project root to Python path so tests can import uscomp
project_root = Path(__file__).parent.parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from uscomp.calibration import CalibrationParams, PixelCoord  # noqa: E402
from uscomp.optical_flow import TrackedPoint  # noqa: E402
from uscomp.regression import build_training_set, solve_regression_lstsq  # noqa: E402
from uscomp.serializable import SerializableRegistry  # noqa: E402
from uscomp.simulator import ForwardDeformation, PhantomSpec, simulate_palpation  # noqa: E402
from uscomp.stiffness import fit_stiffness, indentation_samples  # noqa: E402


@pytest.fixture
def clear_registry():
    """Empty the SerializableRegistry for the test and restore the package classes afterwards."""
    saved = dict(SerializableRegistry.registry)
    SerializableRegistry.registry.clear()

    yield

    SerializableRegistry.registry.clear()
    SerializableRegistry.registry.update(saved)


@pytest.fixture(scope="session")
def small_cal():
    """160x120 frames over the full 40 mm depth; keeps simulation and tracking fast."""
    return CalibrationParams(image_length=160, image_width=120, depth_mm=40.0, element_length_mm=37.5)


@pytest.fixture(scope="session")
def stiff_spec():
    return PhantomSpec.stiff()


@pytest.fixture(scope="session")
def soft_spec():
    return PhantomSpec.soft()


@pytest.fixture(scope="session")
def stiff_palpation(stiff_spec, small_cal):
    return simulate_palpation(stiff_spec, 10.0, 30.0, 20, small_cal)


def _forward_tracks(rec, spec, points):
    cal = rec.calibration
    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    origin = rec.frames[0].pose.translation
    tracks = []
    for frame in rec.frames:
        lam = float((frame.pose.translation - origin) @ frame.pose.force_direction)
        dx, dy = ForwardDeformation.for_phantom(spec, lam).displacement_px(xs, ys, cal)
        tracks.append(
            [
                TrackedPoint(PixelCoord(float(x), float(y)), (float(a), float(b)), "tracked", 0.0)
                for x, y, a, b in zip(xs, ys, dx, dy)
            ]
        )
    return tracks


@pytest.fixture(scope="session")
def grid_points(small_cal):
    xs = np.linspace(10.0, small_cal.image_length - 10.0, 8)
    ys = np.linspace(10.0, small_cal.image_width - 10.0, 6)
    return [(float(x), float(y)) for y in ys for x in xs]


@pytest.fixture(scope="session")
def forward_tracks():
    """Exact tracks from the simulator's forward field, independent of the tracker."""
    return _forward_tracks


@pytest.fixture(scope="session")
def stiff_training_set(stiff_palpation, stiff_spec, grid_points):
    model = fit_stiffness(indentation_samples(stiff_palpation))
    tracks = _forward_tracks(stiff_palpation, stiff_spec, grid_points)
    return build_training_set(stiff_palpation, tracks, model, stiff_spec.layer_thickness_mm)


@pytest.fixture(scope="session")
def stiff_regression(stiff_training_set):
    return solve_regression_lstsq(stiff_training_set)
