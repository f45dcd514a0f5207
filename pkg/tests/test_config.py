"""
Tests for the pipeline configuration and its YAML loader.
"""

import numpy as np
import pytest

from uscomp.config import (
    FitConfig,
    PalpationConfig,
    PipelineConfig,
    SweepConfig,
)
from uscomp.exceptions import ConfigError, UnknownFieldError
from uscomp.optical_flow import LKParams
from uscomp.simulator import PhantomSpec


class TestPresets:
    """Test the stiff and soft presets."""

    def test_stiff(self):
        config = PipelineConfig.preset("stiff")
        config.validate()
        assert config.phantom.length_mm == 40.0
        assert config.palpation.n_positions == 4
        assert config.sweep.forces == [5.0, 10.0, 15.0, 20.0, 25.0]
        assert np.pi * config.phantom.vessel_radius_mm**2 == pytest.approx(224.0, rel=0.01)

    def test_soft(self):
        config = PipelineConfig.preset("soft")
        config.validate()
        assert config.phantom.length_mm == 60.0
        assert config.palpation.n_positions == 3
        assert config.palpation.f_max == 16.0
        assert config.sweep.forces == [4.0, 7.0, 10.0, 13.0]
        assert np.pi * config.phantom.vessel_radius_mm**2 == pytest.approx(57.0, rel=0.01)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="preset"):
            PipelineConfig.preset("gel")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="sections"):
            PipelineConfig(tracker=LKParams())

    def test_path_length(self):
        config = PipelineConfig(sweep=SweepConfig(start_mm=10.0))
        assert config.path_length == 30.0
        config.sweep.path_length_mm = 12.5
        assert config.path_length == 12.5


class TestValidation:
    """Test section and cross-section checks."""

    @pytest.mark.parametrize(
        "sections",
        [
            {"palpation": PalpationConfig(n_positions=1)},
            {"palpation": PalpationConfig(f_max=0.1)},
            {"palpation": PalpationConfig(n_features=4)},
            {"sweep": SweepConfig(forces=[])},
            {"sweep": SweepConfig(forces=[5.0, -1.0])},
            {"sweep": SweepConfig(n_frames=1)},
            {"fit": FitConfig(solver="sgd")},
            {"fit": FitConfig(layer_thickness_mm=0.0)},
        ],
    )
    def test_invalid_sections(self, sections):
        with pytest.raises(ConfigError):
            PipelineConfig(**sections).validate()

    def test_sweep_must_stay_on_phantom(self):
        config = PipelineConfig(sweep=SweepConfig(start_mm=30.0, path_length_mm=20.0))
        with pytest.raises(ConfigError, match="leaves"):
            config.validate()

    def test_sweep_to_soft_phantom_end(self):
        PipelineConfig(phantom=PhantomSpec.soft(), sweep=SweepConfig(start_mm=20.0)).validate()

    def test_wrong_section_type(self):
        config = PipelineConfig()
        config.fit = SweepConfig()
        with pytest.raises(ConfigError, match="FitConfig"):
            config.validate()


class TestConfigFiles:
    """Test saving and strict loading."""

    def test_round_trip(self, tmp_path):
        config = PipelineConfig.preset("soft")
        config.seed = 7
        config.fit.solver = "lstsq"
        loaded = PipelineConfig.load(config.save(tmp_path / "config.yaml"))
        assert loaded.seed == 7
        assert loaded.fit.solver == "lstsq"
        assert loaded.sweep.forces == config.sweep.forces
        assert loaded.phantom.length_mm == 60.0
        assert isinstance(loaded.optical_flow, LKParams)

    def test_untagged_sections(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text("seed: 3\npalpation:\n  n_positions: 3\nfit:\n  solver: lstsq\n", encoding="utf-8")
        config = PipelineConfig.load(path)
        assert config.seed == 3
        assert config.palpation.n_positions == 3
        assert config.palpation.f_max == 30.0
        assert config.fit.solver == "lstsq"

    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text("", encoding="utf-8")
        config = PipelineConfig.load(path)
        assert config.seed == 0
        assert config.compounding.spacing_mm == 0.3

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text("palpation:\n  n_position: 3\n", encoding="utf-8")
        with pytest.raises(UnknownFieldError):
            PipelineConfig.load(path)

    def test_unknown_top_level_key(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text("tracker:\n  window: 21\n", encoding="utf-8")
        with pytest.raises(UnknownFieldError):
            PipelineConfig.load(path)

    def test_invalid_value(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text("fit:\n  solver: sgd\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="solver"):
            PipelineConfig.load(path)

    def test_not_a_mapping(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text("- 1\n- 2\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="mapping"):
            PipelineConfig.load(path)

    def test_malformed_yaml(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text("fit: [unclosed\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="Cannot read"):
            PipelineConfig.load(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="Cannot read"):
            PipelineConfig.load(tmp_path / "absent.yaml")
