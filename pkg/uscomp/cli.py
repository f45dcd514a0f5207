"""Command line interface.

Exit codes: 0 success, 2 invalid input or data, 3 numerical failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from uscomp import __version__
from uscomp.calibration import CalibrationParams
from uscomp.compounding import compound, export_slices, write_volume
from uscomp.config import PipelineConfig
from uscomp.correction import CorrectionModel, correct_recording, read_masks, write_masks
from uscomp.exceptions import EXIT_VALIDATION, UscompError
from uscomp.io import read_sweep, write_sweep
from uscomp.metrics import MetricsReport, frame_metrics, sample_frames
from uscomp.optical_flow import LKParams, select_features, track_sequence, tracks_table
from uscomp.pipeline import run_pipeline
from uscomp.propagation import StiffnessAtlas, SweepPath
from uscomp.regression import (
    DisplacementRegression,
    RegressionOptions,
    build_training_set,
    fit_regression,
    solve_regression_lstsq,
)
from uscomp.serializable import load_yaml, save_yaml
from uscomp.simulator import PhantomSpec, simulate_palpation, simulate_sweep
from uscomp.stiffness import (
    CONTACT_THRESHOLD_N,
    compare_fit_orders,
    contact_reference_index,
    fit_stiffness,
    indentation_samples,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT)


# command line flag -> PhantomSpec field
PHANTOM_FLAGS = {
    "phantom_length": "length_mm",
    "vessel_depth": "vessel_depth_mm",
    "vessel_depth_slope": "vessel_depth_slope",
    "vessel_radius": "vessel_radius_mm",
    "vessel_radius_slope": "vessel_radius_slope",
    "vessel_lateral": "vessel_lateral_mm",
    "layer_thickness": "layer_thickness_mm",
    "decay_depth": "decay_depth_mm",
    "incompressibility": "incompressibility",
    "speckle": "speckle_sigma",
    "force_noise": "force_noise_n",
    "texture_seed": "texture_seed",
    "texture_correlation": "texture_correlation_px",
    "lumen_intensity": "lumen_intensity",
    "phantom_id": "phantom_id",
}


def phantom_from_args(args) -> PhantomSpec:
    """Preset or YAML phantom with the phantom flags given on the command line applied."""
    if args.phantom == "stiff":
        spec = PhantomSpec.stiff()
    elif args.phantom == "soft":
        spec = PhantomSpec.soft()
    else:
        spec = load_yaml(args.phantom, expected=PhantomSpec)
    overrides = {field: getattr(args, flag) for flag, field in PHANTOM_FLAGS.items() if getattr(args, flag) is not None}
    if args.stiffness is not None:
        overrides["stiffness_knots"] = [[0.0, *args.stiffness]]
    if not overrides:
        return spec
    params = {name: getattr(spec, name) for name in spec.fields_to_serialize}
    params.update(overrides)
    return PhantomSpec(**params)


def _calibration(path: Optional[str]) -> CalibrationParams:
    return CalibrationParams() if path is None else load_yaml(path, expected=CalibrationParams)


def cmd_sim_palpation(args) -> int:
    rec = simulate_palpation(
        phantom_from_args(args), args.position, args.f_max, args.steps, _calibration(args.calibration), args.seed
    )
    write_sweep(rec, args.output)
    print(f"Wrote {len(rec)} frames to {args.output}")
    return 0


def cmd_sim_sweep(args) -> int:
    spec = phantom_from_args(args)
    length = args.length if args.length is not None else spec.length_mm - args.start
    rec = simulate_sweep(spec, args.force, length, args.frames, _calibration(args.calibration), args.start, args.seed)
    write_sweep(rec, args.output)
    print(f"Wrote {len(rec)} frames to {args.output}")
    return 0


def cmd_track(args) -> int:
    rec = read_sweep(args.recording)
    images = rec.images()
    params = LKParams()
    tracks = track_sequence(images, select_features(images[0], args.features, params), params)
    table = tracks_table(tracks)
    table.to_csv(args.output, index=False, float_format="%.10g")
    lost = int((table[table.frame == len(rec) - 1].status != "tracked").sum())
    print(f"Tracked {len(tracks[0])} features over {len(rec)} frames, {lost} lost")
    return 0


def cmd_fit_stiffness(args) -> int:
    rec = read_sweep(args.recording)
    samples = indentation_samples(rec, args.contact_threshold)
    model = fit_stiffness(samples)
    mean, sd = model.summary(samples[:, 0])
    print(model)
    print(f"k_d = {mean:.1f} +/- {sd:.1f} N/m over {samples.shape[0]} samples")
    for degree, r2 in compare_fit_orders(samples).items():
        print(f"order {degree}: R^2 = {r2:.6f}")
    if args.output:
        save_yaml(model, args.output)
    return 0


def cmd_fit(args) -> int:
    rec = read_sweep(args.recording)
    model = fit_stiffness(indentation_samples(rec, args.contact_threshold))
    images = rec.images()
    params = LKParams()
    tracks = track_sequence(images, select_features(images[0], args.features, params), params)
    ts = build_training_set(
        rec, tracks, model, args.ltick, args.boundary, args.intervals, args.contact_threshold
    )
    if args.solver == "lstsq":
        reg = solve_regression_lstsq(ts)
    else:
        reg = fit_regression(ts, RegressionOptions(max_iters=args.max_iters, seed=args.seed))
    save_yaml(reg, args.output)
    print(f"{reg!r} -> {args.output}")
    return 0


def cmd_atlas(args) -> int:
    reg = load_yaml(args.regression, expected=DisplacementRegression)
    palpations = [read_sweep(p) for p in args.palpations]
    path = SweepPath(origin=[0.0, args.start, 0.0], start_mm=args.start, length_mm=args.length)
    order = np.argsort([path.position_of(p.frames[0].pose) for p in palpations])
    palpations = [palpations[i] for i in order]
    models, positions, contacts = [], [], []
    for rec in palpations:
        models.append(fit_stiffness(indentation_samples(rec, args.contact_threshold)))
        positions.append(path.position_of(rec.frames[0].pose))
        contacts.append(rec.frames[contact_reference_index(rec.forces, args.contact_threshold)].pose.translation)
    atlas = StiffnessAtlas(positions, models, args.start + args.length, np.array(contacts))
    CorrectionModel(reg, atlas, path, args.lambda_source).save(args.output)
    print(f"Atlas of {len(atlas)} positions -> {args.output}")
    return 0


def _correct(model: CorrectionModel, args) -> int:
    rec = read_sweep(args.recording)
    corrected, masks = correct_recording(model, rec)
    write_sweep(corrected, args.output)
    write_masks(masks, args.output)
    print(f"Corrected {len(corrected)} frames -> {args.output}")
    return 0


def cmd_correct(args) -> int:
    """Correct with the regression's own training stiffness everywhere."""
    reg = load_yaml(args.model, expected=DisplacementRegression)
    rec = read_sweep(args.recording)
    path = SweepPath.from_poses(rec.poses)
    length = max(path.length_mm, 1.0)
    path.length_mm = length
    atlas = StiffnessAtlas([0.0, length], [reg.stiffness, reg.stiffness], length)
    return _correct(CorrectionModel(reg, atlas, path), args)


def cmd_sweep_correct(args) -> int:
    return _correct(CorrectionModel.load(args.model), args)


def cmd_compound(args) -> int:
    rec = read_sweep(args.recording)
    masks = read_masks(args.recording, len(rec)) if args.masks else None
    vol = compound(rec, rec.calibration, args.spacing, masks)
    write_volume(vol, args.output)
    if args.slices:
        for path in export_slices(vol, args.slices):
            print(f"Slice -> {path}")
    print(f"Volume {vol.dims} at {vol.spacing} mm -> {args.output}")
    return 0


def cmd_metrics(args) -> int:
    test = read_sweep(args.recording)
    truth = read_sweep(args.ground_truth)
    if len(test) != len(truth):
        raise UscompError(f"Sweeps differ in length: {len(test)} vs {len(truth)}")
    valid = read_masks(args.recording, len(test)) if args.masks else None
    ids = sample_frames(len(test), args.frames, args.seed)
    report = MetricsReport(
        frame_metrics(
            [f.image for f in test.frames],
            [f.image for f in truth.frames],
            test.calibration,
            args.label,
            ids,
            valid,
        )
    )
    report.to_csv(args.output)
    print(report.summary().to_string(index=False))
    return 0


def cmd_report(args) -> int:
    report_dir = Path(args.run_dir) / "report"
    for name in ("stiffness", "summary", "volumes", "sensitivity"):
        path = report_dir / f"{name}.csv"
        if path.is_file():
            print(f"== {name} ==")
            print(pd.read_csv(path).to_string(index=False))
    return 0


def cmd_pipeline(args) -> int:
    if args.write_default_config:
        PipelineConfig.preset(args.preset).save(args.write_default_config)
        print(f"Default config -> {args.write_default_config}")
        return 0
    if args.config is None and args.output is None:
        raise UscompError("pipeline needs a config file or --preset and -o")
    config = PipelineConfig.load(args.config) if args.config else PipelineConfig.preset(args.preset)
    result = run_pipeline(config, args.output or "uscomp-run", resume=args.resume)
    print(result.frames.summary(by=("label", "force")).to_string(index=False))
    print(f"Report -> {result.report_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uscomp", description="Force-induced deformation correction for tracked ultrasound sweeps."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", help="Logging level (default: INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("sim", help="Simulate phantom recordings")
    sim_sub = sim.add_subparsers(dest="kind", required=True)
    palp = sim_sub.add_parser("palpation", help="Force ramp at one position")
    palp.add_argument("--position", type=float, default=0.0, help="Position along the phantom, mm")
    palp.add_argument("--f-max", type=float, default=30.0, help="Peak force, N")
    palp.add_argument("--steps", type=int, default=40, help="Number of frames")
    palp.set_defaults(func=cmd_sim_palpation)
    sweep = sim_sub.add_parser("sweep", help="Constant-force sweep")
    sweep.add_argument("--force", type=float, default=0.0, help="Contact force, N")
    sweep.add_argument("--frames", type=int, default=100)
    sweep.add_argument("--length", type=float, default=None, help="Path length, mm (default: to phantom end)")
    sweep.add_argument("--start", type=float, default=0.0, help="Start position, mm")
    sweep.set_defaults(func=cmd_sim_sweep)
    for p in (palp, sweep):
        p.add_argument("--phantom", default="stiff", help="stiff, soft or a PhantomSpec YAML file")
        p.add_argument("--calibration", default=None, help="CalibrationParams YAML file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("-o", "--output", required=True, help="Recording directory to write")
        p.add_argument("--phantom-length", type=float, default=None, help="Phantom length, mm")
        p.add_argument("--vessel-depth", type=float, default=None, help="Vessel centre depth, mm")
        p.add_argument("--vessel-radius", type=float, default=None, help="Vessel radius, mm")
        p.add_argument("--vessel-lateral", type=float, default=None, help="Vessel lateral offset, mm")
        p.add_argument("--layer-thickness", type=float, default=None, help="Flexible layer thickness, mm")
        p.add_argument("--decay-depth", type=float, default=None, help="Displacement decay depth, mm")
        p.add_argument("--speckle", type=float, default=None, help="Speckle noise sigma")
        p.add_argument("--force-noise", type=float, default=None, help="Force sensor noise sigma, N")
        p.add_argument("--texture-seed", type=int, default=None, help="Seed of the tissue texture")
        p.add_argument("--texture-correlation", type=float, default=None, help="Texture correlation length, px")
        p.add_argument("--lumen-intensity", type=float, default=None, help="Mean lumen echo intensity")
        p.add_argument("--vessel-depth-slope", type=float, default=None, help="Vessel depth change per mm of path")
        p.add_argument("--vessel-radius-slope", type=float, default=None, help="Vessel radius change per mm of path")
        p.add_argument("--incompressibility", type=float, default=None, help="Lateral bulge per unit compression")
        p.add_argument("--phantom-id", default=None, help="Identifier stored with the recording")
        p.add_argument(
            "--stiffness",
            type=float,
            nargs=3,
            metavar=("C1", "C2", "C3"),
            default=None,
            help="Uniform force law F = C1*x^2 + C2*x + C3, x in mm",
        )

    track = sub.add_parser("track", help="Track features through a palpation")
    track.add_argument("recording")
    track.add_argument("--features", type=int, default=50)
    track.add_argument("-o", "--output", required=True, help="CSV file")
    track.set_defaults(func=cmd_track)

    fs = sub.add_parser("fit-stiffness", help="Fit the quadratic force law of a palpation")
    fs.add_argument("recording")
    fs.add_argument("-o", "--output", default=None, help="Optional StiffnessModel YAML file")
    fs.set_defaults(func=cmd_fit_stiffness)

    fit = sub.add_parser("fit", help="Fit the displacement regression on a palpation")
    fit.add_argument("recording")
    fit.add_argument("--ltick", type=float, default=50.0, help="Flexible layer thickness L_T, mm")
    fit.add_argument("--features", type=int, default=50)
    fit.add_argument("--boundary", type=int, default=64, help="Boundary samples per force level")
    fit.add_argument("--intervals", type=int, default=64, help="Force intervals of the load integral")
    fit.add_argument("--solver", choices=("adam", "lstsq"), default="adam")
    fit.add_argument("--max-iters", type=int, default=20000)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("-o", "--output", required=True, help="DisplacementRegression YAML file")
    fit.set_defaults(func=cmd_fit)

    atlas = sub.add_parser("atlas", help="Bundle a regression with palpations along the sweep")
    atlas.add_argument("regression")
    atlas.add_argument("palpations", nargs="+")
    atlas.add_argument("--start", type=float, default=0.0, help="Sweep start position, mm")
    atlas.add_argument("--length", type=float, required=True, help="Sweep length, mm")
    atlas.add_argument("--lambda-source", choices=("force", "pose"), default="force")
    atlas.add_argument("-o", "--output", required=True, help="CorrectionModel YAML file")
    atlas.set_defaults(func=cmd_atlas)

    for name, func, help_text in (
        ("correct", cmd_correct, "Correct a recording with a regression at its training stiffness"),
        ("sweep-correct", cmd_sweep_correct, "Correct a sweep with a CorrectionModel"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("recording")
        p.add_argument("model")
        p.add_argument("-o", "--output", required=True, help="Corrected recording directory")
        p.set_defaults(func=func)

    comp = sub.add_parser("compound", help="Compound a recording into a volume")
    comp.add_argument("recording")
    comp.add_argument("--spacing", type=float, default=0.3, help="Voxel size, mm")
    comp.add_argument("--masks", action="store_true", help="Skip pixels outside the stored masks")
    comp.add_argument("--slices", metavar="DIR", default=None, help="Also write the middle slice of each plane as PGM")
    comp.add_argument("-o", "--output", required=True, help="Volume path without suffix")
    comp.set_defaults(func=cmd_compound)

    met = sub.add_parser("metrics", help="Compare a sweep with the ground-truth sweep")
    met.add_argument("recording")
    met.add_argument("ground_truth")
    met.add_argument("--frames", type=int, default=10)
    met.add_argument("--seed", type=int, default=0)
    met.add_argument("--label", default="test")
    met.add_argument("--masks", action="store_true")
    met.add_argument("-o", "--output", required=True, help="CSV file")
    met.set_defaults(func=cmd_metrics)

    rep = sub.add_parser("report", help="Print the tables of a pipeline run")
    rep.add_argument("run_dir")
    rep.set_defaults(func=cmd_report)

    pipe = sub.add_parser("pipeline", help="Run the full pipeline")
    pipe.add_argument("config", nargs="?", default=None, help="PipelineConfig YAML file")
    pipe.add_argument("--preset", choices=("stiff", "soft"), default="stiff")
    pipe.add_argument("--resume", action="store_true", help="Reuse existing stage artifacts")
    pipe.add_argument("--write-default-config", metavar="PATH", default=None)
    pipe.add_argument("-o", "--output", default=None, help="Run directory")
    pipe.set_defaults(func=cmd_pipeline)

    for p in (fs, fit, atlas):
        p.add_argument("--contact-threshold", type=float, default=CONTACT_THRESHOLD_N)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.func(args)
    except UscompError as e:
        logger.error("%s", e)
        return e.exit_code
    except OSError as e:
        logger.error("%s", e)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
