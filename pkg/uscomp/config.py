"""Pipeline configuration.

Every section is a registered ``Serializable`` so a config file is read with the
same strict loader as model files. Sections may be written without their
``_type`` tag; the loader fills it in from the section name.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import yaml

from uscomp.calibration import CalibrationParams
from uscomp.correction import LAMBDA_SOURCES
from uscomp.exceptions import ConfigError
from uscomp.optical_flow import LKParams
from uscomp.regression import RegressionOptions
from uscomp.serializable import Serializable, register_serializable, save_yaml
from uscomp.simulator import PhantomSpec

logger = logging.getLogger(__name__)

SOLVERS = ("adam", "lstsq")
# lumen areas of 224 and 57 mm^2
STIFF_VESSEL_RADIUS_MM = 8.444
SOFT_VESSEL_RADIUS_MM = 4.26


@register_serializable
class PalpationConfig(Serializable):
    """Palpation protocol: N_k positions, force ramp and what the regression sees of it."""

    def __init__(
        self,
        n_positions: int = 4,
        f_max: float = 30.0,
        n_steps: int = 40,
        contact_threshold: float = 0.2,
        n_features: int = 50,
        n_boundary: int = 64,
    ):
        super().__init__()
        self.n_positions = int(n_positions)
        self.f_max = float(f_max)
        self.n_steps = int(n_steps)
        self.contact_threshold = float(contact_threshold)
        self.n_features = int(n_features)
        self.n_boundary = int(n_boundary)
        self.add_serializable_fields(
            ["n_positions", "f_max", "n_steps", "contact_threshold", "n_features", "n_boundary"]
        )

    def validate(self) -> None:
        if self.n_positions < 2:
            raise ConfigError("palpation.n_positions must be at least 2")
        if self.f_max <= self.contact_threshold:
            raise ConfigError("palpation.f_max must exceed the contact threshold")
        if self.n_features < 8 or self.n_boundary < 2:
            raise ConfigError("palpation needs at least 8 features and 2 boundary samples")


@register_serializable
class SweepConfig(Serializable):
    """Sweeps: one ground truth at zero force plus one per ladder force."""

    def __init__(
        self,
        forces: Sequence[float] = (5.0, 10.0, 15.0, 20.0, 25.0),
        n_frames: int = 100,
        start_mm: float = 0.0,
        path_length_mm: Optional[float] = None,
    ):
        super().__init__()
        self.forces = [float(f) for f in forces]
        self.n_frames = int(n_frames)
        self.start_mm = float(start_mm)
        self.path_length_mm = None if path_length_mm is None else float(path_length_mm)
        self.add_serializable_fields(["forces", "n_frames", "start_mm", "path_length_mm"])

    def validate(self) -> None:
        if not self.forces or any(f < 0 for f in self.forces):
            raise ConfigError("sweep.forces must be a non-empty list of non-negative forces")
        if self.n_frames < 2:
            raise ConfigError("sweep.n_frames must be at least 2")


@register_serializable
class FitConfig(Serializable):
    """Regression fit: layer thickness L_T, integration intervals and solver."""

    def __init__(self, layer_thickness_mm: float = 50.0, n_force_intervals: int = 64, solver: str = "adam"):
        super().__init__()
        self.layer_thickness_mm = float(layer_thickness_mm)
        self.n_force_intervals = int(n_force_intervals)
        self.solver = solver
        self.add_serializable_fields(["layer_thickness_mm", "n_force_intervals", "solver"])

    def validate(self) -> None:
        if self.layer_thickness_mm <= 0:
            raise ConfigError("fit.layer_thickness_mm must be positive")
        if self.n_force_intervals < 1:
            raise ConfigError("fit.n_force_intervals must be at least 1")
        if self.solver not in SOLVERS:
            raise ConfigError(f"fit.solver must be one of {SOLVERS}")


@register_serializable
class PropagationConfig(Serializable):
    def __init__(self, lambda_source: str = "force"):
        super().__init__()
        self.lambda_source = lambda_source
        self.add_serializable_fields(["lambda_source"])

    def validate(self) -> None:
        if self.lambda_source not in LAMBDA_SOURCES:
            raise ConfigError(f"propagation.lambda_source must be one of {LAMBDA_SOURCES}")


@register_serializable
class CompoundingConfig(Serializable):
    def __init__(self, spacing_mm: float = 0.3):
        super().__init__()
        self.spacing_mm = float(spacing_mm)
        self.add_serializable_fields(["spacing_mm"])

    def validate(self) -> None:
        if self.spacing_mm <= 0:
            raise ConfigError("compounding.spacing_mm must be positive")


@register_serializable
class MetricsConfig(Serializable):
    """Number of randomly chosen frames compared per sweep, and their seed."""

    def __init__(self, n_frames: int = 10, seed: int = 0):
        super().__init__()
        self.n_frames = int(n_frames)
        self.seed = int(seed)
        self.add_serializable_fields(["n_frames", "seed"])

    def validate(self) -> None:
        if self.n_frames < 1:
            raise ConfigError("metrics.n_frames must be at least 1")


SECTIONS = {
    "phantom": PhantomSpec,
    "calibration": CalibrationParams,
    "palpation": PalpationConfig,
    "sweep": SweepConfig,
    "optical_flow": LKParams,
    "fit": FitConfig,
    "regression": RegressionOptions,
    "propagation": PropagationConfig,
    "compounding": CompoundingConfig,
    "metrics": MetricsConfig,
}


@register_serializable
class PipelineConfig(Serializable):
    """All settings of an end-to-end run."""

    def __init__(self, seed: int = 0, **sections: Any):
        super().__init__()
        self.seed = int(seed)
        unknown = set(sections) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"Unknown config sections: {sorted(unknown)}")
        for name, cls in SECTIONS.items():
            setattr(self, name, sections.get(name) or cls())
        self.add_serializable_fields(["seed"] + list(SECTIONS))

    @classmethod
    def preset(cls, phantom: str) -> "PipelineConfig":
        """Defaults for the ``stiff`` or ``soft`` phantom."""
        if phantom == "stiff":
            return cls(phantom=PhantomSpec.stiff(vessel_radius_mm=STIFF_VESSEL_RADIUS_MM))
        if phantom == "soft":
            return cls(
                phantom=PhantomSpec.soft(vessel_radius_mm=SOFT_VESSEL_RADIUS_MM),
                palpation=PalpationConfig(n_positions=3, f_max=16.0),
                sweep=SweepConfig(forces=(4.0, 7.0, 10.0, 13.0)),
            )
        raise ConfigError(f"Unknown phantom preset '{phantom}'")

    def validate(self) -> None:
        for name, cls in SECTIONS.items():
            section = getattr(self, name)
            if not isinstance(section, cls):
                raise ConfigError(f"Section '{name}' must be a {cls.__name__}")
            section.validate()
        length = self.phantom.length_mm
        end = self.sweep.start_mm + self.path_length
        if self.sweep.start_mm < 0 or end > length + 1e-9:
            raise ConfigError(f"Sweep [{self.sweep.start_mm}, {end}] mm leaves the {length} mm phantom")

    @property
    def path_length(self) -> float:
        if self.sweep.path_length_mm is not None:
            return self.sweep.path_length_mm
        return self.phantom.length_mm - self.sweep.start_mm

    def deserialize(self, data: Dict[str, Any], strict: bool = False) -> None:
        tagged = dict(data)
        for name, cls in SECTIONS.items():
            value = tagged.get(name)
            if isinstance(value, dict) and "_type" not in value:
                tagged[name] = {"_type": cls.__name__, **value}
        super().deserialize(tagged, strict=strict)

    def save(self, path: Union[str, Path]) -> Path:
        return save_yaml(self, path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PipelineConfig":
        """Read a config file strictly; unknown keys raise ``UnknownFieldError``.

        Raises:
            ConfigError: If the file cannot be read, is not a mapping or is invalid.
        """
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"Config {path} must be a mapping")
        return cls.from_dict({"_type": cls.__name__, **data}, strict=True)

    def section_names(self) -> List[str]:
        return list(SECTIONS)
