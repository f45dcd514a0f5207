"""
Tests for feature selection and Lucas-Kanade tracking.
"""

import numpy as np
import pytest
from scipy import ndimage

from uscomp.calibration import PixelCoord
from uscomp.exceptions import DomainError, NoFeaturesError
from uscomp.optical_flow import (
    LOST,
    TRACKED,
    LKParams,
    TrackedPoint,
    select_features,
    track,
    track_sequence,
    tracks_table,
)
from uscomp.simulator import ForwardDeformation


def textured(shape=(120, 160), seed=1):
    noise = ndimage.gaussian_filter(np.random.default_rng(seed).standard_normal(shape), 2.0)
    noise = (noise - noise.min()) / (noise.max() - noise.min())
    return (40 + 175 * noise).astype(np.uint8)


def shifted(image, dx, dy):
    """Content moves by (+dx, +dy) pixels."""
    return np.roll(np.roll(image, dy, axis=0), dx, axis=1)


CENTRE_POINTS = [PixelCoord(float(x), float(y)) for x in (50, 80, 110) for y in (40, 60, 80)]


class TestLKParams:
    """Test tracker settings."""

    def test_search_bound(self):
        assert LKParams(window=15, levels=3).search_bound == 49.0

    def test_cv_kwargs(self):
        kwargs = LKParams(window=21, levels=4).cv_kwargs()
        assert kwargs["winSize"] == (21, 21)
        assert kwargs["maxLevel"] == 3


class TestSelectFeatures:
    """Test Shi-Tomasi feature selection."""

    def test_features_on_texture(self):
        points = select_features(textured(), 40)
        assert 8 <= len(points) <= 40
        assert all(isinstance(p, PixelCoord) for p in points)
        margin = LKParams().half_window + 1
        assert all(margin <= p.x < 160 - margin and margin <= p.y < 120 - margin for p in points)

    def test_min_distance(self):
        points = np.array(select_features(textured(), 60, LKParams(min_distance=12.0)))
        gaps = np.hypot(*(points[:, None, :] - points[None, :, :]).transpose(2, 0, 1))
        np.fill_diagonal(gaps, np.inf)
        assert gaps.min() >= 12.0 - 1e-6

    def test_deterministic(self):
        image = textured(seed=4)
        assert select_features(image, 50) == select_features(image, 50)

    def test_blob_rim(self):
        ys, xs = np.mgrid[0:120, 0:160]
        radius = np.hypot(xs - 80.0, ys - 60.0)
        blob = ndimage.gaussian_filter(np.where(radius <= 20.0, 220.0, 40.0), 1.5)
        points = np.array(select_features(blob.astype(np.uint8), 30))
        distance = np.hypot(points[:, 0] - 80.0, points[:, 1] - 60.0)
        assert len(points) >= 8
        assert np.all(np.abs(distance - 20.0) <= 7.0)

    def test_flat_image(self):
        with pytest.raises(NoFeaturesError):
            select_features(np.full((120, 160), 128, dtype=np.uint8), 20)

    def test_too_few_requested(self):
        with pytest.raises(DomainError):
            select_features(textured(), 7)


class TestTrack:
    """Test single-pair tracking."""

    def test_recovers_translation(self):
        image = textured()
        result = track(image, shifted(image, 3, -2), CENTRE_POINTS)
        assert all(t.tracked for t in result)
        disp = np.array([t.displacement for t in result])
        np.testing.assert_allclose(disp, np.tile([3.0, -2.0], (len(result), 1)), atol=0.2)

    def test_identity(self):
        image = textured()
        result = track(image, image, CENTRE_POINTS)
        np.testing.assert_allclose([t.displacement for t in result], 0.0, atol=1e-3)

    def test_forward_and_backward_cancel(self):
        image = textured(seed=2)
        moved = np.clip(ndimage.shift(image.astype(float), (1.3, 2.6), order=3), 0, 255).astype(np.uint8)
        forward = track(image, moved, CENTRE_POINTS)
        landed = [
            PixelCoord(p.x + t.displacement[0], p.y + t.displacement[1]) for p, t in zip(CENTRE_POINTS, forward)
        ]
        backward = track(moved, image, landed)
        sums = np.hypot(
            [f.displacement[0] + b.displacement[0] for f, b in zip(forward, backward)],
            [f.displacement[1] + b.displacement[1] for f, b in zip(forward, backward)],
        )
        assert np.median(sums) <= 0.3

    def test_size_mismatch(self):
        with pytest.raises(DomainError, match="sizes differ"):
            track(textured(), textured((100, 160)), CENTRE_POINTS)

    def test_border_points(self):
        with pytest.raises(DomainError, match="margin"):
            track(textured(), textured(), [PixelCoord(2.0, 60.0)])


class TestTrackSequence:
    """Test chained tracking."""

    def test_displacements_relative_to_first_frame(self):
        image = textured()
        frames = [shifted(image, 0, -k) for k in range(4)]
        result = track_sequence(frames, CENTRE_POINTS)
        assert len(result) == 4
        assert all(t.displacement == (0.0, 0.0) for t in result[0])
        disp = np.array([t.displacement for t in result[3]])
        np.testing.assert_allclose(disp[:, 1], -3.0, atol=0.3)
        np.testing.assert_allclose(disp[:, 0], 0.0, atol=0.3)

    @pytest.mark.slow
    def test_tracks_phantom_compression(self, stiff_palpation, stiff_spec, grid_points):
        cal = stiff_palpation.calibration
        result = track_sequence(list(stiff_palpation.images()), [PixelCoord(*p) for p in grid_points])
        last = result[-1]
        assert sum(t.tracked for t in last) >= 0.8 * len(last)
        lam = stiff_palpation.translations[-1, 2] - stiff_palpation.translations[0, 2]
        truth = ForwardDeformation.for_phantom(stiff_spec, lam)
        errors = []
        for t in last:
            if t.tracked:
                dx, dy = truth.displacement_px(t.ref_pixel.x, t.ref_pixel.y, cal)
                errors.append(np.hypot(t.displacement[0] - dx, t.displacement[1] - dy))
        assert np.median(errors) < 0.75


class TestTracksTable:
    """Test the tabular view of tracks."""

    def test_lost_points_are_nan(self):
        tracks = [
            [TrackedPoint(PixelCoord(10.0, 20.0), (0.0, 0.0), TRACKED, 0.0)],
            [TrackedPoint(PixelCoord(10.0, 20.0), None, LOST, 41.0)],
        ]
        table = tracks_table(tracks)
        assert list(table["frame"]) == [0, 1]
        assert np.isnan(table.loc[1, "dx"])
        assert table.loc[1, "status"] == LOST
        assert table.loc[0, "y"] == 20.0
