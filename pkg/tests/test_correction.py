"""
Tests for deformation fields, inversion, resampling and frame correction.
"""

import numpy as np
import pytest
from scipy import ndimage

from uscomp.calibration import CalibrationParams, Pose
from uscomp.correction import (
    CorrectionModel,
    DeformationField,
    apply_field,
    correct_frame,
    correct_recording,
    field_from_model,
    invert_and_resample,
    invert_field,
    read_masks,
    write_masks,
)
from uscomp.exceptions import DomainError, InversionError, MissingFileError, ValidationError
from uscomp.io import Frame
from uscomp.metrics import dice, normalized_cross_correlation, segment_vessel
from uscomp.propagation import StiffnessAtlas, SweepPath, force_based_evaluator, rebind
from uscomp.regression import build_training_set, solve_regression_lstsq
from uscomp.simulator import ForwardDeformation, PhantomRenderer, PhantomSpec, simulate_palpation, simulate_sweep
from uscomp.stiffness import fit_stiffness, indentation_samples


def textured(shape=(60, 80), seed=2):
    noise = ndimage.gaussian_filter(np.random.default_rng(seed).standard_normal(shape), 2.5)
    noise = (noise - noise.min()) / (noise.max() - noise.min())
    return (30 + 190 * noise).astype(np.uint8)


def ground_truth_model(regression, spec, positions=None, **kwargs):
    positions = positions or [0.0, spec.length_mm]
    atlas = StiffnessAtlas(positions, [spec.ground_truth_model(s) for s in positions], spec.length_mm)
    return CorrectionModel(regression, atlas, SweepPath(length_mm=spec.length_mm), **kwargs)


def vessel_dice(image, reference, valid=None):
    return dice(segment_vessel(image, valid), segment_vessel(reference))


class TestDeformationField:
    """Test the dense field container."""

    def test_zeros(self):
        field = DeformationField.zeros((4, 6))
        assert field.shape == (4, 6)
        assert field.rms() == 0.0

    def test_invalid(self):
        with pytest.raises(ValidationError):
            DeformationField(np.zeros((3, 3)), np.zeros((3, 4)))
        with pytest.raises(ValidationError, match="non-finite"):
            DeformationField(np.full((3, 3), np.nan), np.zeros((3, 3)))

    def test_bilinear_sample(self):
        ys, xs = np.mgrid[0:5, 0:7].astype(float)
        field = DeformationField(2.0 * xs, ys)
        dx, dy = field.sample(np.array([1.5, 10.0]), np.array([2.25, 1.0]))
        np.testing.assert_allclose(dx, [3.0, 12.0])
        np.testing.assert_allclose(dy, [2.25, 1.0])

    def test_rms_with_mask(self):
        field = DeformationField(np.array([[3.0, 0.0]]), np.array([[4.0, 0.0]]))
        assert field.rms() == pytest.approx(np.sqrt(12.5))
        assert field.rms(np.array([[True, False]])) == pytest.approx(5.0)


class TestResampling:
    """Test inverse warping of frames."""

    def test_zero_field_is_identity(self):
        image = textured()
        corrected, mask = invert_and_resample(image, DeformationField.zeros(image.shape))
        np.testing.assert_array_equal(corrected, image)
        assert mask.all()

    def test_integer_shift(self):
        image = textured()
        field = DeformationField(np.full(image.shape, 2.0), np.zeros(image.shape))
        corrected, mask = invert_and_resample(image, field)
        np.testing.assert_array_equal(corrected[:, :-2], image[:, 2:])
        assert not mask[:, -2:].any()
        assert mask[:, :-2].all()
        np.testing.assert_array_equal(corrected[:, -2:], 0)

    def test_shape_mismatch(self):
        with pytest.raises(DomainError):
            invert_and_resample(textured(), DeformationField.zeros((5, 5)))

    def test_apply_then_correct(self, small_cal):
        image = textured(small_cal.shape)
        truth = ForwardDeformation(indentation_mm=5.0)
        field = DeformationField(*truth.field(small_cal))
        deformed, _ = apply_field(image, field)
        restored, mask = invert_and_resample(deformed, field)
        assert normalized_cross_correlation(restored, image, mask) >= 0.9
        assert normalized_cross_correlation(deformed, image, mask) < normalized_cross_correlation(
            restored, image, mask
        )


class TestInversion:
    """Test fixed-point field inversion."""

    def test_constant_field(self):
        field = DeformationField(np.full((8, 9), 1.5), np.full((8, 9), -0.5))
        inverse = invert_field(field)
        np.testing.assert_allclose(inverse.dx, -1.5, atol=1e-9)
        np.testing.assert_allclose(inverse.dy, 0.5, atol=1e-9)

    def test_smooth_field_round_trip(self, small_cal):
        field = DeformationField(*ForwardDeformation(indentation_mm=6.0).field(small_cal))
        inverse = invert_field(field)
        ys, xs = np.mgrid[20:100, 20:140].astype(float)
        ref_x = xs + inverse.dx[20:100, 20:140]
        ref_y = ys + inverse.dy[20:100, 20:140]
        dx, dy = field.sample(ref_x, ref_y)
        np.testing.assert_allclose(ref_x + dx, xs, atol=0.02)
        np.testing.assert_allclose(ref_y + dy, ys, atol=0.02)

    def test_folding_field_fails(self):
        ys, xs = np.mgrid[0:10, 0:20].astype(float)
        with pytest.raises(InversionError) as excinfo:
            invert_field(DeformationField(1.5 * xs, np.zeros_like(xs)))
        assert excinfo.value.fraction > 0.5


class TestFieldFromModel:
    """Test dense fields from a fitted regression."""

    def test_negative_force(self, stiff_regression, small_cal):
        with pytest.raises(DomainError):
            field_from_model(rebind(stiff_regression, 3.0), -1.0, small_cal)

    def test_zero_force(self, stiff_regression, small_cal):
        field = field_from_model(rebind(stiff_regression, 3.0), 0.0, small_cal)
        assert field.rms() == 0.0

    def test_matches_simulated_field(self, stiff_regression, stiff_spec, small_cal):
        evaluator = force_based_evaluator(stiff_regression)
        field = field_from_model(evaluator, 15.0, small_cal)
        lam = stiff_spec.ground_truth_model(10.0).indentation_for_force(15.0)
        truth = ForwardDeformation.for_phantom(stiff_spec, lam).field(small_cal)
        error = DeformationField(field.dx - truth[0], field.dy - truth[1])
        assert error.rms() < 1.0
        assert field.force == 15.0

    def test_corrects_palpation_frame(self, stiff_regression, stiff_palpation, stiff_spec, small_cal):
        frame = stiff_palpation.frames[-1]
        template = PhantomRenderer(stiff_spec, small_cal).template(10.0)
        field = field_from_model(force_based_evaluator(stiff_regression), frame.force, small_cal)
        corrected, mask = invert_and_resample(frame.image, field)
        assert vessel_dice(frame.image, template) < 0.85
        assert vessel_dice(corrected, template, mask) >= 0.9


class TestCorrectionModel:
    """Test the persisted correction model and frame correction."""

    def test_lambda_source(self, stiff_regression, stiff_spec):
        with pytest.raises(ValidationError, match="lambda_source"):
            ground_truth_model(stiff_regression, stiff_spec, lambda_source="ultrasound")
        with pytest.raises(ValidationError, match="contact points"):
            ground_truth_model(stiff_regression, stiff_spec, lambda_source="pose")

    def test_save_and_load(self, tmp_path, stiff_regression, stiff_spec):
        model = ground_truth_model(stiff_regression, stiff_spec)
        loaded = CorrectionModel.load(model.save(tmp_path / "model.yaml"))
        np.testing.assert_array_equal(loaded.regression.kx, stiff_regression.kx)
        assert loaded.atlas.sample_positions == [0.0, 40.0]
        assert loaded.path.length_mm == 40.0
        assert loaded.lambda_source == "force"

    def test_corrected_frame_pose(self, stiff_regression, stiff_palpation, stiff_spec, small_cal):
        frame = stiff_palpation.frames[-1]
        corrected, mask = correct_frame(ground_truth_model(stiff_regression, stiff_spec), frame, small_cal)
        assert corrected.force == 0.0
        assert corrected.timestamp == frame.timestamp
        np.testing.assert_allclose(corrected.pose.translation, [0.0, 10.0, 0.0], atol=1e-9)
        assert mask.shape == small_cal.shape

    def test_pose_indentation(self, stiff_regression, stiff_spec):
        atlas = StiffnessAtlas(
            [0.0, 40.0],
            [stiff_spec.ground_truth_model(0.0)] * 2,
            40.0,
            contact_points=[[0.0, 0.0, 0.0], [0.0, 40.0, 0.0]],
        )
        model = CorrectionModel(stiff_regression, atlas, SweepPath(length_mm=40.0), "pose")
        frame = Frame(np.zeros((4, 4)), 7.0, Pose(translation=[0.0, 12.0, 2.5]), 0.0)
        assert model.indentation(frame, model.position_of(frame)) == pytest.approx(2.5)

    def test_zero_force_sweep_unchanged(self, stiff_regression, stiff_spec):
        cal = CalibrationParams(40, 30)
        sweep = simulate_sweep(stiff_spec, 0.0, 4.0, 3, cal, start=5.0)
        corrected, masks = correct_recording(ground_truth_model(stiff_regression, stiff_spec), sweep)
        for before, after, mask in zip(sweep.frames, corrected.frames, masks):
            np.testing.assert_array_equal(after.image, before.image)
            assert after.pose == before.pose
            assert mask.all()
        assert corrected.manifest.acquisition["corrected"] is True

    def test_masks_round_trip(self, tmp_path):
        masks = [np.eye(4, dtype=bool), ~np.eye(4, dtype=bool)]
        write_masks(masks, tmp_path)
        loaded = read_masks(tmp_path, 2)
        for a, b in zip(masks, loaded):
            np.testing.assert_array_equal(a, b)
        with pytest.raises(MissingFileError):
            read_masks(tmp_path, 3)


@pytest.mark.slow
class TestPropagatedCorrection:
    """Test correction away from the training position."""

    def regression_for(self, spec, cal, forward_tracks, grid_points, position=0.0):
        palpation = simulate_palpation(spec, position, 30.0, 20, cal)
        stiffness = fit_stiffness(indentation_samples(palpation))
        tracks = forward_tracks(palpation, spec, grid_points)
        return solve_regression_lstsq(build_training_set(palpation, tracks, stiffness, spec.layer_thickness_mm))

    def mean_dice(self, sweep, truth, correct):
        scores = []
        for frame, reference in zip(sweep.frames, truth.frames):
            image, mask = correct(frame)
            scores.append(vessel_dice(image, reference.image, mask))
        return float(np.mean(scores))

    def test_varying_stiffness(self, small_cal, forward_tracks, grid_points):
        spec = PhantomSpec(stiffness_knots=[[0.0, 0.0, 3.0, 0.0], [40.0, 0.0, 2.0, 0.0]])
        reg = self.regression_for(spec, small_cal, forward_tracks, grid_points)
        model = ground_truth_model(reg, spec)
        sweep = simulate_sweep(spec, 15.0, 6.0, 4, small_cal, start=34.0)
        truth = simulate_sweep(spec, 0.0, 6.0, 4, small_cal, start=34.0)
        baseline = force_based_evaluator(reg)

        propagated = self.mean_dice(sweep, truth, lambda f: correct_frame(model, f, small_cal))
        force_based = self.mean_dice(
            sweep, truth, lambda f: invert_and_resample(f.image, field_from_model(baseline, f.force, small_cal))
        )
        assert propagated >= 0.9
        assert propagated > force_based

    def test_cross_tissue(self, small_cal, stiff_spec, soft_spec, forward_tracks, grid_points):
        reg = self.regression_for(stiff_spec, small_cal, forward_tracks, grid_points, position=10.0)
        model = ground_truth_model(reg, soft_spec)
        sweep = simulate_sweep(soft_spec, 10.0, 4.0, 3, small_cal, start=20.0)
        truth = simulate_sweep(soft_spec, 0.0, 4.0, 3, small_cal, start=20.0)
        baseline = force_based_evaluator(reg)

        propagated = self.mean_dice(sweep, truth, lambda f: correct_frame(model, f, small_cal))
        force_based = self.mean_dice(
            sweep, truth, lambda f: invert_and_resample(f.image, field_from_model(baseline, f.force, small_cal))
        )
        assert propagated >= 0.85
        assert propagated > force_based + 0.05
