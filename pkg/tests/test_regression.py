"""
Tests for the coupled displacement regression: basis, load, training set and fits.
"""

import dataclasses
import logging

import numpy as np
import pytest

from uscomp.exceptions import DivergenceError, DomainError, NonPhysicalStiffnessError, ValidationError
from uscomp.regression import (
    BOUNDARY,
    FLOW,
    LOAD_TERMS,
    DisplacementRegression,
    RegressionOptions,
    basis,
    boundary_displacement,
    boundary_sensitivity,
    build_training_set,
    cumulative_load,
    eval_cumulative,
    eval_increment,
    fit_regression,
    loss_and_gradient,
    solve_regression_lstsq,
    training_loss,
)
from uscomp.serializable import load_yaml, save_yaml
from uscomp.stiffness import StiffnessModel


class TestBasis:
    """Test the quadratic basis."""

    def test_term_order(self):
        np.testing.assert_array_equal(basis(2.0, 3.0, 5.0), [4, 9, 25, 6, 10, 15, 2, 3, 5, 1])

    def test_broadcasting(self):
        assert basis(np.zeros((4, 5)), 1.0, np.ones(5)).shape == (4, 5, 10)

    def test_load_terms_contain_h(self):
        at_zero = basis(0.3, 0.7, 0.0)
        at_load = basis(0.3, 0.7, 0.5)
        changed = np.flatnonzero(at_load != at_zero)
        assert tuple(changed) == LOAD_TERMS


class TestCumulativeLoad:
    """Test the accumulated load variable."""

    def test_linear_law(self):
        assert cumulative_load(StiffnessModel.linear(4.0), 10.0) == pytest.approx(2.5)

    def test_tracks_indentation(self):
        law = StiffnessModel(c1=0.075, c2=0.2, c3=0.0)
        assert cumulative_load(law, 16.0, 64) == pytest.approx(law.indentation_for_force(16.0), rel=1e-3)

    def test_more_intervals_converge(self):
        law = StiffnessModel(c1=0.075, c2=0.2, c3=0.0)
        truth = law.indentation_for_force(16.0)
        coarse = abs(cumulative_load(law, 16.0, 4) - truth)
        fine = abs(cumulative_load(law, 16.0, 256) - truth)
        assert fine < coarse

    def test_zero_and_negative(self):
        law = StiffnessModel.linear(2.0)
        assert cumulative_load(law, 0.0) == 0.0
        with pytest.raises(DomainError):
            cumulative_load(law, -1.0)


class TestRegressionModel:
    """Test evaluation of a DisplacementRegression."""

    def make(self):
        kx = np.zeros(10)
        ky = np.zeros(10)
        kx[8] = 1.0
        ky[2] = 0.5
        ky[5] = -1.0
        return DisplacementRegression(kx, ky, 100.0, 50.0, 4.0, 2.0, 10.0)

    def test_zero_load_is_zero(self):
        reg = self.make()
        reg.kx[9] = 3.0
        dx, dy = reg.displacement_at_load(np.array([10.0, 60.0]), np.array([5.0, 40.0]), 0.0)
        np.testing.assert_array_equal(dx, 0.0)
        np.testing.assert_array_equal(dy, 0.0)

    def test_denormalized_output(self):
        dx, dy = self.make().displacement_at_load(50.0, 25.0, 2.0)
        # xn = 0.5, yn = 0.5, hn = 0.5
        assert dx == pytest.approx(2.0 * 0.5)
        assert dy == pytest.approx(10.0 * (0.5 * 0.25 - 0.25))

    def test_clamps_with_warning(self, caplog):
        reg = self.make()
        with caplog.at_level(logging.WARNING, logger="uscomp.regression"):
            far = reg.displacement_at_load(50.0, 25.0, 40.0)
        assert "clamping" in caplog.text
        edge = reg.displacement_at_load(50.0, 25.0, 1.2 * 4.0)
        np.testing.assert_allclose(far, edge)

    def test_eval_increment_stiffness(self):
        with pytest.raises(NonPhysicalStiffnessError):
            eval_increment(self.make(), 10.0, 10.0, 5.0, 0.0)

    def test_linear_law_increment_equals_cumulative(self):
        reg = self.make()
        x, y = np.array([10.0, 90.0]), np.array([45.0, 5.0])
        inc = eval_increment(reg, x, y, 6.0, 3.0)
        cum = eval_cumulative(reg, x, y, 6.0, StiffnessModel.linear(3.0))
        np.testing.assert_allclose(inc, cum, rtol=1e-12)

    def test_coefficient_shape(self):
        with pytest.raises(ValidationError):
            DisplacementRegression(kx=np.zeros(9))
        with pytest.raises(ValidationError):
            DisplacementRegression(h_scale=0.0)

    def test_yaml_round_trip(self, tmp_path, stiff_regression):
        loaded = load_yaml(save_yaml(stiff_regression, tmp_path / "reg.yaml"), expected=DisplacementRegression)
        np.testing.assert_array_equal(loaded.coefficients, stiff_regression.coefficients)
        assert loaded.norms == stiff_regression.norms
        assert loaded.stiffness.c2 == stiff_regression.stiffness.c2


class TestTrainingSet:
    """Test pooling of flow and boundary samples."""

    def test_counts(self, stiff_training_set):
        ts = stiff_training_set
        assert ts.n_levels == 20
        assert ts.n_flow == 20 * 48
        assert ts.n_boundary == 20 * 64
        np.testing.assert_array_equal(ts.samples_per_level(), 112)
        assert set(np.unique(ts.kind)) == {FLOW, BOUNDARY}

    def test_boundary_rows(self, stiff_training_set, small_cal):
        ts = stiff_training_set
        boundary = ts.kind == BOUNDARY
        top = boundary & (ts.y == 0.0)
        bottom = boundary & (ts.y == small_cal.image_width)
        np.testing.assert_array_equal(ts.dy[top], 0.0)
        np.testing.assert_array_equal(ts.dx[bottom], 0.0)
        last = bottom & (ts.level == ts.n_levels - 1)
        expected = -ts.level_lambdas[-1] / ts.layer_thickness_mm * small_cal.image_width
        np.testing.assert_allclose(ts.dy[last], expected)

    def test_loads_follow_indentation(self, stiff_training_set):
        ts = stiff_training_set
        np.testing.assert_allclose(ts.level_loads, ts.level_lambdas, rtol=1e-3, atol=1e-9)
        assert ts.norms()[2] == pytest.approx(ts.level_loads.max())

    def test_boundary_displacement(self):
        assert boundary_displacement(3.0, 50.0, 120) == pytest.approx(-7.2)

    def test_misaligned_tracks(self, stiff_palpation, stiff_training_set, forward_tracks, stiff_spec, grid_points):
        tracks = forward_tracks(stiff_palpation, stiff_spec, grid_points)[:-1]
        with pytest.raises(DomainError, match="Tracks cover"):
            build_training_set(stiff_palpation, tracks, stiff_training_set.stiffness, 50.0)

    def test_layer_thickness_positive(self, stiff_palpation, stiff_training_set):
        with pytest.raises(DomainError):
            build_training_set(stiff_palpation, [[]] * len(stiff_palpation), stiff_training_set.stiffness, 0.0)

    def test_too_few_levels(self, stiff_palpation, stiff_training_set):
        tracks = [[]] * len(stiff_palpation)
        with pytest.raises(DomainError, match="force levels"):
            build_training_set(
                stiff_palpation, tracks, stiff_training_set.stiffness, 50.0, contact_threshold=28.0
            )

    def test_lost_points_skipped(self, stiff_palpation, stiff_training_set, forward_tracks, stiff_spec, grid_points):
        tracks = forward_tracks(stiff_palpation, stiff_spec, grid_points)
        for frame in tracks:
            frame[0] = dataclasses.replace(frame[0], displacement=None, status="lost")
        ts = build_training_set(stiff_palpation, tracks, stiff_training_set.stiffness, 50.0)
        assert ts.n_flow == 20 * 47


class TestFit:
    """Test the least-squares and ADAM fits against the simulator's field."""

    def test_loss_gradient(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((50, 4))
        b = rng.standard_normal((2, 50))
        gram, moments, target_sq = a.T @ a / 50, b @ a / 50, float(np.sum(b * b) / 50)
        params = rng.standard_normal((2, 4))
        loss, grad = loss_and_gradient(params, gram, moments, target_sq)
        assert loss == pytest.approx(np.sum((params @ a.T - b) ** 2) / 50)
        step = 1e-6
        bumped = params.copy()
        bumped[1, 2] += step
        numeric = (loss_and_gradient(bumped, gram, moments, target_sq)[0] - loss) / step
        assert grad[1, 2] == pytest.approx(numeric, rel=1e-4)

    def test_only_load_terms_fitted(self, stiff_regression):
        free = [i for i in range(10) if i not in LOAD_TERMS]
        np.testing.assert_array_equal(stiff_regression.kx[free], 0.0)
        np.testing.assert_array_equal(stiff_regression.ky[free], 0.0)

    def test_lstsq_matches_field(self, stiff_regression, stiff_training_set, small_cal):
        ts = stiff_training_set
        dx, dy = stiff_regression.displacement_at_load(ts.x, ts.y, ts.load)
        error = np.sqrt(np.sum((dx - ts.dx) ** 2 + (dy - ts.dy) ** 2))
        assert error / np.sqrt(np.sum(ts.dx**2 + ts.dy**2)) < 0.15

        top = (ts.kind == BOUNDARY) & (ts.y == 0.0)
        assert np.sqrt(np.mean(dx[top] ** 2 + dy[top] ** 2)) <= 0.5
        bottom = (ts.kind == BOUNDARY) & (ts.y == small_cal.image_width) & (np.abs(ts.dy) > 1.0)
        np.testing.assert_allclose(dy[bottom], ts.dy[bottom], rtol=0.05)

    def test_lstsq_loss_small(self, stiff_regression):
        assert stiff_regression.final_loss <= 1e-3
        assert stiff_regression.dx_scale == stiff_regression.dy_scale

    def test_normalization_invariance(self, stiff_training_set):
        ts = stiff_training_set
        scaled = dataclasses.replace(
            ts,
            x=2.0 * ts.x,
            y=2.0 * ts.y,
            image_length=2 * ts.image_length,
            image_width=2 * ts.image_width,
            load=0.5 * ts.load,
            level_loads=0.5 * ts.level_loads,
            dx=3.0 * ts.dx,
            dy=3.0 * ts.dy,
        )
        base = solve_regression_lstsq(ts)
        other = solve_regression_lstsq(scaled)
        x = np.array([5.0, 60.0, 150.0])
        y = np.array([0.0, 45.0, 110.0])
        load = 0.6 * ts.level_loads[-1]
        expected = base.displacement_at_load(x, y, load)
        got = other.displacement_at_load(2.0 * x, 2.0 * y, 0.5 * load)
        np.testing.assert_allclose(got[0], 3.0 * expected[0], atol=1e-6)
        np.testing.assert_allclose(got[1], 3.0 * expected[1], atol=1e-6)

    def test_cumulative_displacement_continuous_in_force(self, stiff_regression, stiff_training_set):
        forces = np.linspace(0.0, 30.0, 601)
        path = np.array(
            [eval_cumulative(stiff_regression, 80.0, 100.0, f, stiff_training_set.stiffness) for f in forces]
        )
        steps = np.linalg.norm(np.diff(path, axis=0), axis=1)
        assert steps.max() <= 3.0 * steps.mean()
        assert steps.max() < 0.5

    def test_training_loss_matches_final_loss(self, stiff_regression, stiff_training_set):
        assert training_loss(stiff_regression, stiff_training_set) == pytest.approx(
            stiff_regression.final_loss, rel=1e-9
        )

    def test_adam_reaches_lstsq(self, stiff_regression, stiff_training_set):
        reg = fit_regression(stiff_training_set, RegressionOptions())
        assert reg.iterations > 0
        assert reg.final_loss <= stiff_regression.final_loss + 1e-5
        assert reg.final_loss <= 1e-3
        assert training_loss(reg, stiff_training_set) == pytest.approx(reg.final_loss, abs=1e-9)

    def test_adam_is_deterministic(self, stiff_training_set):
        opts = RegressionOptions(max_iters=300, init_scale=0.1, seed=3)
        first = fit_regression(stiff_training_set, opts)
        second = fit_regression(stiff_training_set, opts)
        np.testing.assert_array_equal(first.coefficients, second.coefficients)

    def test_early_stop(self, stiff_training_set):
        reg = fit_regression(stiff_training_set, RegressionOptions(patience=5, tolerance=1e3))
        assert reg.iterations == 5

    def test_divergence(self, stiff_training_set):
        broken = dataclasses.replace(stiff_training_set, dx=stiff_training_set.dx.copy())
        broken.dx[3] = np.nan
        with pytest.raises(DivergenceError) as excinfo:
            fit_regression(broken, RegressionOptions(max_iters=50))
        assert excinfo.value.iteration == 1

    def test_fitted_increment_matches_load(self, stiff_regression):
        x, y = np.array([30.0, 80.0, 140.0]), np.array([20.0, 60.0, 100.0])
        inc = eval_increment(stiff_regression, x, y, 10.0, 3.2)
        direct = stiff_regression.displacement_at_load(x, y, 10.0 / 3.2)
        np.testing.assert_allclose(inc, direct, atol=1e-12)

    def test_options_validation(self):
        with pytest.raises(ValidationError):
            RegressionOptions(step=0.0)
        with pytest.raises(ValidationError):
            RegressionOptions(beta2=1.0)


class TestBoundarySensitivity:
    """Test the L_T sensitivity report."""

    def test_thinner_layer_moves_bottom_more(self, stiff_regression):
        result = boundary_sensitivity(stiff_regression, 5.0, 120)
        assert set(result) == {0.8, 1.0, 1.2}
        assert result[0.8] < result[1.0] < result[1.2] < 0.0
        assert result[1.0] == pytest.approx(-5.0 / stiff_regression.layer_thickness_mm * 120)
