"""
uscomp - Force-induced deformation correction for tracked ultrasound sweeps

Learns how tissue under a handheld probe deforms with contact force, carries
that model along a sweep using palpated stiffness, resamples the compressed
frames to zero force and compounds them into a 3D volume.
"""

from uscomp.calibration import (
    CalibrationParams,
    PixelCoord,
    Pose,
    pixel_to_probe,
    pixel_to_world,
    pixels_to_world,
)
from uscomp.compounding import (
    Volume,
    compound,
    extract_slice,
    read_volume,
    shared_bounds,
    write_volume,
)
from uscomp.config import PipelineConfig
from uscomp.correction import (
    CorrectionModel,
    DeformationField,
    correct_frame,
    correct_recording,
    field_from_model,
    invert_and_resample,
    invert_field,
)
from uscomp.exceptions import (
    ConfigError,
    DeserializationError,
    DivergenceError,
    DomainError,
    InversionError,
    NoFeaturesError,
    NonPhysicalStiffnessError,
    NoVesselError,
    NumericalError,
    RecordingError,
    SerializationError,
    StageError,
    UscompError,
    ValidationError,
)
from uscomp.io import Frame, RecordingManifest, SweepRecording, read_sweep, write_sweep
from uscomp.metrics import (
    MetricsReport,
    VesselMask,
    centroid_offset,
    cross_section_area,
    dice,
    segment_vessel,
)
from uscomp.optical_flow import LKParams, TrackedPoint, select_features, track, track_sequence
from uscomp.pipeline import Pipeline, PipelineResult, run_pipeline
from uscomp.propagation import (
    BoundEvaluator,
    StiffnessAtlas,
    SweepPath,
    interpolation_weights,
    local_stiffness,
    rebind,
)
from uscomp.regression import (
    DisplacementRegression,
    RegressionOptions,
    TrainingSet,
    build_training_set,
    cumulative_load,
    eval_cumulative,
    eval_increment,
    fit_regression,
    solve_regression_lstsq,
)
from uscomp.serializable import Serializable, load_yaml, register_serializable, save_yaml
from uscomp.simulator import PhantomSpec, simulate_palpation, simulate_sweep
from uscomp.stiffness import (
    StiffnessModel,
    dynamic_stiffness,
    fit_stiffness,
    indentation_for_force,
    indentation_samples,
)

__all__ = [
    # Geometry
    "CalibrationParams",
    "PixelCoord",
    "Pose",
    "pixel_to_probe",
    "pixel_to_world",
    "pixels_to_world",
    # Recordings
    "Frame",
    "RecordingManifest",
    "SweepRecording",
    "read_sweep",
    "write_sweep",
    # Stiffness
    "StiffnessModel",
    "fit_stiffness",
    "indentation_samples",
    "dynamic_stiffness",
    "indentation_for_force",
    # Tracking
    "LKParams",
    "TrackedPoint",
    "select_features",
    "track",
    "track_sequence",
    # Regression
    "DisplacementRegression",
    "RegressionOptions",
    "TrainingSet",
    "build_training_set",
    "cumulative_load",
    "eval_increment",
    "eval_cumulative",
    "fit_regression",
    "solve_regression_lstsq",
    # Propagation
    "StiffnessAtlas",
    "SweepPath",
    "BoundEvaluator",
    "interpolation_weights",
    "local_stiffness",
    "rebind",
    # Correction
    "DeformationField",
    "CorrectionModel",
    "field_from_model",
    "invert_field",
    "invert_and_resample",
    "correct_frame",
    "correct_recording",
    # Compounding
    "Volume",
    "compound",
    "shared_bounds",
    "extract_slice",
    "write_volume",
    "read_volume",
    # Metrics
    "VesselMask",
    "MetricsReport",
    "segment_vessel",
    "dice",
    "centroid_offset",
    "cross_section_area",
    # Simulation and pipeline
    "PhantomSpec",
    "simulate_palpation",
    "simulate_sweep",
    "PipelineConfig",
    "Pipeline",
    "PipelineResult",
    "run_pipeline",
    # Serialization
    "Serializable",
    "register_serializable",
    "save_yaml",
    "load_yaml",
    # Exceptions
    "UscompError",
    "ValidationError",
    "DomainError",
    "ConfigError",
    "RecordingError",
    "SerializationError",
    "DeserializationError",
    "NumericalError",
    "NonPhysicalStiffnessError",
    "NoFeaturesError",
    "DivergenceError",
    "InversionError",
    "NoVesselError",
    "StageError",
]

__version__ = "0.1.0"
