"""End-to-end run on the synthetic phantom.

Stages and their artifacts under the run directory::

    palpation/pos_NN/        palpation recordings at the N_k positions
    tracks.csv               tracked features of the first palpation
    model.yaml               CorrectionModel (regression, atlas, path)
    sweeps/ground_truth/     zero-force sweep
    sweeps/f_<F>/deformed/   sweep at contact force F
    sweeps/f_<F>/corrected/  corrected sweep plus masks/
    volumes/<name>.raw|yaml  compounded volumes on one shared grid
    report/                  frames.csv, volumes.csv, summary.csv, stiffness.csv, sensitivity.csv
    report/slices/           axial and coronal PGM slices of every volume

With ``resume`` set, a stage whose artifact already exists is loaded instead of
recomputed.
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Tuple, Union

import numpy as np
import pandas as pd

from uscomp.compounding import (
    Volume,
    compound,
    export_slices,
    extract_slice,
    read_volume,
    shared_bounds,
    volume_files,
    write_volume,
)
from uscomp.config import PipelineConfig
from uscomp.correction import CorrectionModel, correct_recording, read_masks, write_masks
from uscomp.exceptions import NoVesselError, StageError
from uscomp.io import MANIFEST_NAME, SweepRecording, read_sweep, write_sweep
from uscomp.metrics import (
    MetricsReport,
    compare_masks,
    frame_metrics,
    missing_row,
    sample_frames,
    segment_vessel,
    select_max_area_slice,
    vessel_width,
)
from uscomp.optical_flow import select_features, track_sequence, tracks_table
from uscomp.propagation import StiffnessAtlas, SweepPath, equidistant_positions
from uscomp.regression import (
    DisplacementRegression,
    boundary_sensitivity,
    build_training_set,
    fit_regression,
    solve_regression_lstsq,
)
from uscomp.simulator import simulate_palpation, simulate_sweep
from uscomp.stiffness import (
    StiffnessModel,
    compare_fit_orders,
    contact_reference_index,
    fit_stiffness,
    indentation_samples,
)

logger = logging.getLogger(__name__)

GROUND_TRUTH = "ground_truth"
DEFORMED = "deformed"
CORRECTED = "corrected"


@contextmanager
def stage(name: str) -> Iterator[None]:
    """Tag any error raised inside with the stage name."""
    logger.info("Stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e


def force_key(force: float) -> str:
    return f"f_{force:g}"


@dataclass
class PipelineResult:
    """Paths and tables produced by a run."""

    out_dir: Path
    model: CorrectionModel
    frames: MetricsReport
    volumes: MetricsReport
    stiffness: pd.DataFrame
    volume_paths: Dict[str, Path] = field(default_factory=dict)

    @property
    def report_dir(self) -> Path:
        return self.out_dir / "report"


class Pipeline:
    """Runs the stages of one config into one directory."""

    def __init__(self, config: PipelineConfig, out_dir: Union[str, Path], resume: bool = False):
        config.validate()
        self.config = config
        self.out_dir = Path(out_dir)
        self.resume = resume
        self.cal = config.calibration
        self.end_mm = config.sweep.start_mm + config.path_length

    def _recording(self, path: Path, make) -> SweepRecording:
        if self.resume and (path / MANIFEST_NAME).is_file():
            logger.info("Reusing %s", path)
            return read_sweep(path)
        rec = make()
        write_sweep(rec, path)
        return rec

    def palpations(self) -> Tuple[List[float], List[SweepRecording]]:
        cfg = self.config
        positions = equidistant_positions(self.end_mm - cfg.sweep.start_mm, cfg.palpation.n_positions)
        positions = [cfg.sweep.start_mm + s for s in positions]
        recordings = []
        with stage("palpation"):
            for i, s in enumerate(positions):
                recordings.append(
                    self._recording(
                        self.out_dir / "palpation" / f"pos_{i:02d}",
                        lambda s=s, i=i: simulate_palpation(
                            cfg.phantom, s, cfg.palpation.f_max, cfg.palpation.n_steps, self.cal, cfg.seed + i
                        ),
                    )
                )
        return positions, recordings

    def stiffness_models(self, palpations: List[SweepRecording]) -> List[StiffnessModel]:
        with stage("stiffness"):
            return [
                fit_stiffness(indentation_samples(p, self.config.palpation.contact_threshold))
                for p in palpations
            ]

    def regression(self, palpation: SweepRecording, model: StiffnessModel) -> DisplacementRegression:
        cfg = self.config
        with stage("tracking"):
            images = palpation.images()
            points = select_features(images[0], cfg.palpation.n_features, cfg.optical_flow)
            tracks = track_sequence(images, points, cfg.optical_flow)
            tracks_table(tracks).to_csv(self.out_dir / "tracks.csv", index=False, float_format="%.10g")
        with stage("regression"):
            ts = build_training_set(
                palpation,
                tracks,
                model,
                cfg.fit.layer_thickness_mm,
                n_boundary=cfg.palpation.n_boundary,
                n_force_intervals=cfg.fit.n_force_intervals,
                contact_threshold=cfg.palpation.contact_threshold,
            )
            if cfg.fit.solver == "lstsq":
                return solve_regression_lstsq(ts)
            return fit_regression(ts, cfg.regression)

    def correction_model(self) -> Tuple[CorrectionModel, List[SweepRecording], List[StiffnessModel]]:
        path = self.out_dir / "model.yaml"
        positions, palpations = self.palpations()
        models = self.stiffness_models(palpations)
        if self.resume and path.is_file():
            logger.info("Reusing %s", path)
            return CorrectionModel.load(path), palpations, models
        regression = self.regression(palpations[0], models[0])
        threshold = self.config.palpation.contact_threshold
        contacts = [p.frames[contact_reference_index(p.forces, threshold)].pose.translation for p in palpations]
        with stage("atlas"):
            atlas = StiffnessAtlas(positions, models, self.end_mm, np.array(contacts))
            sweep_path = SweepPath(
                origin=[0.0, self.config.sweep.start_mm, 0.0],
                direction=[0.0, 1.0, 0.0],
                start_mm=self.config.sweep.start_mm,
                length_mm=self.config.path_length,
            )
            model = CorrectionModel(regression, atlas, sweep_path, self.config.propagation.lambda_source)
            model.save(path)
        return model, palpations, models

    def sweep(self, force: float) -> SweepRecording:
        cfg = self.config
        name = GROUND_TRUTH if force == 0.0 else f"{force_key(force)}/{DEFORMED}"
        with stage(f"sweep {force:g} N"):
            return self._recording(
                self.out_dir / "sweeps" / name,
                lambda: simulate_sweep(
                    cfg.phantom, force, cfg.path_length, cfg.sweep.n_frames, self.cal, cfg.sweep.start_mm, cfg.seed
                ),
            )

    def corrected(self, model: CorrectionModel, deformed: SweepRecording, force: float):
        path = self.out_dir / "sweeps" / force_key(force) / CORRECTED
        with stage(f"correct {force:g} N"):
            if self.resume and (path / MANIFEST_NAME).is_file():
                rec = read_sweep(path)
                return rec, read_masks(path, len(rec))
            rec, masks = correct_recording(model, deformed)
            write_sweep(rec, path)
            write_masks(masks, path)
            return rec, masks

    def volume(self, name: str, rec: SweepRecording, bounds, masks=None) -> Volume:
        path = self.out_dir / "volumes" / name
        with stage(f"compound {name}"):
            if self.resume and volume_files(path)[0].is_file():
                return read_volume(path)
            vol = compound(rec, self.cal, self.config.compounding.spacing_mm, masks, bounds)
            write_volume(vol, path)
            return vol

    def run(self) -> PipelineResult:
        cfg = self.config
        self.out_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(self.out_dir / "config.yaml")
        logger.info("Resolved config:\n%s", cfg.to_yaml())

        model, palpations, stiffness_models = self.correction_model()
        ground_truth = self.sweep(0.0)
        sweeps = {}
        for force in cfg.sweep.forces:
            deformed = self.sweep(force)
            corrected, masks = self.corrected(model, deformed, force)
            sweeps[force] = (deformed, corrected, masks)

        frames = MetricsReport()
        with stage("frame metrics"):
            gt_images = [f.image for f in ground_truth.frames]
            ids = sample_frames(len(ground_truth), cfg.metrics.n_frames, cfg.metrics.seed)
            for force, (deformed, corrected, masks) in sweeps.items():
                for label, rec, valid in ((DEFORMED, deformed, None), (CORRECTED, corrected, masks)):
                    rows = frame_metrics([f.image for f in rec.frames], gt_images, self.cal, label, ids, valid)
                    frames.extend({**row, "force": force} for row in rows)

        bounds = shared_bounds([ground_truth] + [r for d, c, _ in sweeps.values() for r in (d, c)], self.cal)
        volumes = {GROUND_TRUTH: self.volume(GROUND_TRUTH, ground_truth, bounds)}
        for force, (deformed, corrected, masks) in sweeps.items():
            volumes[f"{force_key(force)}_{DEFORMED}"] = self.volume(f"{force_key(force)}_{DEFORMED}", deformed, bounds)
            volumes[f"{force_key(force)}_{CORRECTED}"] = self.volume(
                f"{force_key(force)}_{CORRECTED}", corrected, bounds, masks
            )
        with stage("volume metrics"):
            volume_report, planes = volume_metrics(volumes, cfg.sweep.forces)

        with stage("report"):
            stiffness = stiffness_table(palpations, stiffness_models, cfg.palpation.contact_threshold)
            stiffness["ground_truth_k_mean_n_per_m"] = [
                cfg.phantom.ground_truth_model(float(p.manifest.acquisition["position_mm"])).summary(
                    indentation_samples(p, cfg.palpation.contact_threshold)[:, 0]
                )[0]
                for p in palpations
            ]
            write_report(self.out_dir / "report", frames, volume_report, stiffness, model)
            for name, vol in volumes.items():
                export_slices(vol, self.out_dir / "report" / "slices", planes, prefix=f"{name}_")
        return PipelineResult(
            self.out_dir,
            model,
            frames,
            volume_report,
            stiffness,
            {name: self.out_dir / "volumes" / name for name in volumes},
        )


def volume_metrics(volumes: Dict[str, Volume], forces) -> Tuple[MetricsReport, Dict[str, int]]:
    """Axial metrics and coronal vessel width on the planes where the ground-truth vessel is largest.

    Returns the report and the chosen ``{"axial": j, "coronal": k}`` slice indices.
    """
    gt = volumes[GROUND_TRUTH]
    spacing = (gt.spacing, gt.spacing)
    j = select_max_area_slice(gt, "axial")
    k = select_max_area_slice(gt, "coronal")
    gt_mask = segment_vessel(*extract_slice(gt, "axial", j), j)
    report = MetricsReport()

    def measure(label: str, vol: Volume, force: float) -> dict:
        image, cov = extract_slice(vol, "axial", j)
        try:
            row = compare_masks(segment_vessel(image, cov, j), gt_mask, spacing, label, j)
        except NoVesselError:
            row = missing_row(label, j)
        coronal, coronal_cov = extract_slice(vol, "coronal", k)
        try:
            row["coronal_width_mm"] = vessel_width(segment_vessel(coronal, coronal_cov, k), vol.spacing, coronal_cov)
        except NoVesselError:
            row["coronal_width_mm"] = 0.0
        row["force"] = force
        return row

    report.add(measure(GROUND_TRUTH, gt, 0.0))
    for force in forces:
        report.add(measure(DEFORMED, volumes[f"{force_key(force)}_{DEFORMED}"], force))
        report.add(measure(CORRECTED, volumes[f"{force_key(force)}_{CORRECTED}"], force))
    return report, {"axial": j, "coronal": k}


def stiffness_table(palpations: List[SweepRecording], models: List[StiffnessModel], threshold: float) -> pd.DataFrame:
    rows = []
    for rec, model in zip(palpations, models):
        samples = indentation_samples(rec, threshold)
        mean, sd = model.summary(samples[:, 0])
        orders = compare_fit_orders(samples)
        rows.append(
            {
                "position_mm": float(rec.manifest.acquisition.get("position_mm", np.nan)),
                "c1": model.c1,
                "c2": model.c2,
                "c3": model.c3,
                "r2_linear": orders[1],
                "r2_quadratic": orders[2],
                "r2_cubic": orders[3],
                "k_mean_n_per_m": mean,
                "k_sd_n_per_m": sd,
            }
        )
    return pd.DataFrame(rows)


def write_report(
    report_dir: Path,
    frames: MetricsReport,
    volumes: MetricsReport,
    stiffness: pd.DataFrame,
    model: CorrectionModel,
) -> Path:
    report_dir.mkdir(parents=True, exist_ok=True)
    frames.to_csv(report_dir / "frames.csv")
    volumes.to_csv(report_dir / "volumes.csv")
    frames.summary(by=("label", "force")).to_csv(report_dir / "summary.csv", index=False, float_format="%.10g")
    stiffness.to_csv(report_dir / "stiffness.csv", index=False, float_format="%.10g")
    reg = model.regression
    lam = reg.stiffness.lambda_max
    sensitivity = boundary_sensitivity(reg, lam, int(reg.y_scale))
    pd.DataFrame(
        {
            "layer_thickness_mm": [f * reg.layer_thickness_mm for f in sensitivity],
            "bottom_displacement_px": list(sensitivity.values()),
            "lambda_z_mm": lam,
        }
    ).to_csv(report_dir / "sensitivity.csv", index=False, float_format="%.10g")
    return report_dir


def run_pipeline(config: PipelineConfig, out_dir: Union[str, Path], resume: bool = False) -> PipelineResult:
    """Run every stage; errors surface as ``StageError`` naming the failing stage."""
    return Pipeline(config, out_dir, resume).run()
