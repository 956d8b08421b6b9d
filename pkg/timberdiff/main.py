import json
import sys
from pathlib import Path
from typing import Optional, Sequence, Tuple

import click
import numpy as np
from loguru import logger
from pydantic import ValidationError

from timberdiff import __version__
from timberdiff.config import settings
from timberdiff.pipelines import (
    evaluate_assembly,
    evaluate_joints,
    file_sha256,
    preprocess,
    register,
    sample_targets,
)
from timberdiff.schemas import (
    EvaluationLevel,
    EvaluationResult,
    MetricBackend,
    MetricParams,
    OutlierParams,
    PipelineConfig,
    RegistrationMode,
    RegistrationParams,
    SegmentationParams,
)
from timberdiff.services.cad_model import load_assembly, save_assembly, save_assembly_obj
from timberdiff.services.cloud import (
    estimate_normals,
    load_cloud,
    save_cloud,
    voxel_downsample,
)
from timberdiff.services.metrics import (
    ColorMap,
    cloud_to_mesh_distances,
    colorize,
    member_statistics,
    reports_to_frame,
    summarize,
    write_report_csv,
    write_report_json,
)
from timberdiff.services.registration import save_transform
from timberdiff.services.segmentation import segment_by_normals, segments_to_records
from timberdiff.utils.error_handling import InvalidParameter, IoError, handle_cli_errors
from timberdiff.utils.monitoring import metrics

ASSEMBLY_SUFFIXES = {".obj", ".json"}


def configure_logging(level: str, log_file: Optional[str] = None) -> None:
    logger.remove()
    logger.add(sys.stderr, level=level.upper(),
               format="{time:HH:mm:ss} | {level} | {message}")
    if log_file:
        logger.add(
            log_file,
            rotation="100 MB",
            retention="30 days",
            level=level.upper(),
            format="{time:YYYY-MM-DD HH:mm:ss} | {level} | {message}"
        )


def _mm(value: Optional[float]) -> Optional[float]:
    return None if value is None else value / 1e3


def build_config(voxel_mm: Optional[float] = None, proj_tol_mm: Optional[float] = None,
                 threshold_mm: Optional[float] = None, seed: Optional[int] = None,
                 t1: Optional[Path] = None, no_register: bool = False, refine: bool = True,
                 backend: Optional[str] = None, fixed_mm: Optional[Tuple[float, float]] = None,
                 no_outliers: bool = False, out: Optional[Path] = None) -> PipelineConfig:
    """PipelineConfig from Settings defaults plus CLI overrides given in millimetres"""
    overrides = {"output_dir": out}
    if voxel_mm is not None:
        overrides["voxel_size"] = _mm(voxel_mm)
    if proj_tol_mm is not None:
        overrides["projection_tolerance"] = _mm(proj_tol_mm)
    if seed is not None:
        overrides["seed"] = seed

    mode = RegistrationMode.RANSAC
    if t1 is not None:
        mode = RegistrationMode.EXTERNAL
    elif no_register:
        mode = RegistrationMode.NONE

    try:
        overrides["registration"] = RegistrationParams(mode=mode, transform_path=t1, refine=refine)
        overrides["outliers"] = OutlierParams(enabled=not no_outliers)
        metric_options = {"sample_density": settings.sample_density, "threshold": _mm(threshold_mm)}
        if backend is not None:
            metric_options["beam_backend"] = MetricBackend(backend)
            metric_options["face_backend"] = MetricBackend(backend)
        if fixed_mm is not None:
            metric_options["colormap"] = "fixed"
            metric_options["colormap_bounds"] = (_mm(fixed_mm[0]), _mm(fixed_mm[1]))
        overrides["metrics"] = MetricParams(**metric_options)
        return PipelineConfig.from_settings(settings, **overrides)
    except ValidationError as e:
        raise InvalidParameter(f"invalid configuration: {e.errors()[0]['msg']}") from e


def _input_hashes(**paths: Path) -> dict:
    return {f"{key}:{Path(p).name}": file_sha256(p) for key, p in paths.items() if p is not None}


def _write_outputs(result: EvaluationResult, out: Path, per_point: bool) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create output directory {out}: {e}") from e
    write_report_json(result, out / "report.json", per_point=per_point)
    write_report_csv(result.reports, out / "report.csv")
    try:
        (out / "t1.json").write_text(result.t1.model_dump_json(indent=2), encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot write {out / 't1.json'}: {e}") from e
    if result.colored_cloud is not None:
        save_cloud(result.colored_cloud, out / "colored.ply")
    logger.info(f"Outputs written to {out}")


scan_option = click.option("--scan", "scan_path", required=True,
                           type=click.Path(exists=True, dir_okay=False, path_type=Path))
model_option = click.option("--model", "model_path", required=True,
                            type=click.Path(exists=True, dir_okay=False, path_type=Path))
voxel_option = click.option("--voxel-mm", type=float, default=None,
                            help="Down-sampling voxel edge in millimetres")
seed_option = click.option("--seed", type=int, default=None, help="Run seed (default from settings)")


def evaluation_options(func):
    """Options shared by the two evaluation commands"""
    options = [
        scan_option,
        model_option,
        click.option("--out", "out", required=True, type=click.Path(file_okay=False, path_type=Path)),
        voxel_option,
        click.option("--proj-tol-mm", type=float, default=None),
        click.option("--threshold-mm", type=float, default=None),
        seed_option,
        click.option("--t1", type=click.Path(exists=True, dir_okay=False, path_type=Path),
                     default=None, help="Supplied scan-to-model transform; skips RANSAC"),
        click.option("--no-register", is_flag=True, help="Scan is already in the model frame"),
        click.option("--refine/--no-refine", default=True, help="ICP after the coarse step"),
        click.option("--backend", type=click.Choice([b.value for b in MetricBackend]), default=None),
        click.option("--fixed-mm", type=(float, float), default=None,
                     help="Fixed color map bounds in millimetres"),
        click.option("--no-outliers", is_flag=True),
        click.option("--per-point", is_flag=True, help="Keep per-point distances in report.json"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


@click.group()
@click.version_option(__version__, prog_name=settings.app_name)
@click.option("--log-level", default=None, help="Overrides TIMBERDIFF_LOG_LEVEL")
def cli(log_level: Optional[str]):
    """Compare timber scans against their CAD model."""
    configure_logging(log_level or settings.log_level, settings.log_file)


@cli.command()
@click.argument("source", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("target", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--ascii", "ascii_ply", is_flag=True, help="Write ASCII instead of binary PLY")
@handle_cli_errors
def convert(source: Path, target: Path, ascii_ply: bool):
    """Convert point clouds (PLY, XYZ) or assemblies (OBJ, JSON)."""
    if source.suffix.lower() in ASSEMBLY_SUFFIXES:
        assembly = load_assembly(source)
        if target.suffix.lower() == ".obj":
            save_assembly_obj(assembly, target)
        elif target.suffix.lower() == ".json":
            save_assembly(assembly, target)
        else:
            raise InvalidParameter(f"cannot write an assembly as '{target.suffix}'")
    else:
        save_cloud(load_cloud(source), target, binary=not ascii_ply)
    logger.info(f"Converted {source} -> {target}")
    return 0


@cli.command("preprocess")
@scan_option
@click.option("--out", "out", required=True, type=click.Path(dir_okay=False, path_type=Path))
@voxel_option
@click.option("--no-outliers", is_flag=True)
@handle_cli_errors
def preprocess_command(scan_path: Path, out: Path, voxel_mm: Optional[float], no_outliers: bool):
    """Down-sample, remove outliers and estimate normals."""
    config = build_config(voxel_mm=voxel_mm, no_outliers=no_outliers)
    cloud = preprocess(load_cloud(scan_path), config, [])
    save_cloud(cloud, out)
    click.echo(f"{len(cloud)} points written to {out}")
    return 0


@cli.command("register")
@scan_option
@model_option
@click.option("--out", "out", required=True, type=click.Path(dir_okay=False, path_type=Path))
@voxel_option
@seed_option
@click.option("--refine/--no-refine", default=True)
@handle_cli_errors
def register_command(scan_path: Path, model_path: Path, out: Path, voxel_mm: Optional[float],
                     seed: Optional[int], refine: bool):
    """Estimate T1 (scan -> model) and write it as JSON."""
    config = build_config(voxel_mm=voxel_mm, seed=seed, refine=refine, out=out.parent)
    assembly = load_assembly(model_path)
    cloud = preprocess(load_cloud(scan_path), config, [])
    transform, quality = register(cloud, sample_targets(assembly.beams, config).cloud(), config, [])
    save_transform(transform, out)
    for step, q in quality.items():
        click.echo(f"{step}: fitness {q.fitness:.4f}, rmse {q.inlier_rmse * 1e3:.3f} mm")
    return 0


@cli.command("segment")
@scan_option
@click.option("--out", "out", required=True, type=click.Path(dir_okay=False, path_type=Path))
@voxel_option
@click.option("--angle", type=float, default=15.0, help="Region growing angle in degrees")
@click.option("--k", "k_neighbors", type=int, default=20)
@click.option("--min-size", type=int, default=50)
@click.option("--curvature", type=float, default=4.0,
              help="Edge cut as a multiple of the median surface variation")
@handle_cli_errors
def segment_command(scan_path: Path, out: Path, voxel_mm: Optional[float], angle: float,
                    k_neighbors: int, min_size: int, curvature: float):
    """Dump the normal-based segmentation as JSON."""
    try:
        params = SegmentationParams(angle_threshold=angle, k_neighbors=k_neighbors,
                                    min_segment_size=min_size, curvature_factor=curvature)
    except ValidationError as e:
        raise InvalidParameter(f"invalid segmentation parameters: {e.errors()[0]['msg']}") from e
    cloud = load_cloud(scan_path)
    if voxel_mm is not None:
        cloud = voxel_downsample(cloud, voxel_mm / 1e3)
    if not cloud.has_normals:
        cloud = estimate_normals(cloud, k_neighbors)
    segments = segment_by_normals(cloud, params.angle_threshold, params.k_neighbors,
                                  params.min_segment_size, params.curvature_factor)
    records = [r.model_dump() for r in segments_to_records(segments)]
    try:
        out.write_text(json.dumps(records, indent=1), encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot write {out}: {e}") from e
    click.echo(f"{len(segments)} segments written to {out}")
    return 0


@cli.command("eval-assembly")
@evaluation_options
@handle_cli_errors
def eval_assembly(scan_path, model_path, out, voxel_mm, proj_tol_mm, threshold_mm, seed, t1,
                  no_register, refine, backend, fixed_mm, no_outliers, per_point):
    """Evaluate a whole assembly, one report per beam."""
    config = build_config(voxel_mm, proj_tol_mm, threshold_mm, seed, t1, no_register, refine,
                          backend, fixed_mm, no_outliers, out)
    result = evaluate_assembly(load_cloud(scan_path), load_assembly(model_path), config,
                               inputs=_input_hashes(scan=scan_path, model=model_path, t1=t1))
    _write_outputs(result, out, per_point)
    click.echo(reports_to_frame(result.reports).to_string(index=False))
    return result.exit_code


@cli.command("eval-joints")
@evaluation_options
@click.option("--beam", "beam_id", type=int, default=None, help="Beam id (required with several beams)")
@click.option("--level", type=click.Choice(["per-joint", "per-joint-face"]), default="per-joint")
@handle_cli_errors
def eval_joints(scan_path, model_path, out, voxel_mm, proj_tol_mm, threshold_mm, seed, t1,
                no_register, refine, backend, fixed_mm, no_outliers, per_point, beam_id, level):
    """Evaluate the joints of one beam, per joint or per joint face."""
    config = build_config(voxel_mm, proj_tol_mm, threshold_mm, seed, t1, no_register, refine,
                          backend, fixed_mm, no_outliers, out)
    assembly = load_assembly(model_path)
    if beam_id is None:
        if len(assembly.beams) != 1:
            raise click.UsageError("--beam is required when the model has several beams")
        beam = assembly.beams[0]
    else:
        try:
            beam = assembly.beam(beam_id)
        except KeyError as e:
            raise click.UsageError(str(e)) from e
    result = evaluate_joints(load_cloud(scan_path), beam, config,
                             EvaluationLevel(level.replace("-", "_")),
                             inputs=_input_hashes(scan=scan_path, model=model_path, t1=t1))
    _write_outputs(result, out, per_point)
    click.echo(reports_to_frame(result.reports).to_string(index=False))
    return result.exit_code


@cli.command("colorize")
@click.option("--cloud", "cloud_path", required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path))
@model_option
@click.option("--out", "out", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--fixed-mm", type=(float, float), default=None)
@handle_cli_errors
def colorize_command(cloud_path: Path, model_path: Path, out: Path,
                     fixed_mm: Optional[Tuple[float, float]]):
    """Heatmap PLY of a registered cloud's distance to the model surface."""
    cloud = load_cloud(cloud_path)
    assembly = load_assembly(model_path)
    faces = [face for beam in assembly.beams for face in beam.faces]
    distances = cloud_to_mesh_distances(cloud, faces)
    bounds = None if fixed_mm is None else (fixed_mm[0] / 1e3, fixed_mm[1] / 1e3)
    save_cloud(colorize(cloud, distances, ColorMap.default(bounds)), out)
    report = summarize(distances, entity=assembly.name, level="assembly")
    click.echo(f"mean {report.mean * 1e3:.3f} mm, max {report.max * 1e3:.3f} mm")
    return 0


@cli.command("report")
@click.argument("report_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--threshold-mm", type=float, default=None, help="Recompute with a new threshold")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False, path_type=Path), default=None)
@handle_cli_errors
def report_command(report_path: Path, threshold_mm: Optional[float], csv_path: Optional[Path]):
    """Re-summarise a stored report.json."""
    try:
        result = EvaluationResult.model_validate_json(report_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise InvalidParameter(f"{report_path} is not a report: {e.errors()[0]['msg']}") from e

    reports = result.reports
    if threshold_mm is not None:
        if any(r.per_point_distances is None for r in reports):
            raise InvalidParameter("recomputing needs a report written with --per-point")
        reports = [summarize(np.asarray(r.per_point_distances), threshold_mm / 1e3,
                             entity=r.entity, level=r.level) for r in reports]
    click.echo(reports_to_frame(reports).to_string(index=False))
    members = [r for r in reports if r.level == result.levels[-1]]
    if members:
        stats = member_statistics(members)
        click.echo(f"members: {stats.mean_of_means * 1e3:.3f} +- {stats.std_of_means * 1e3:.3f} mm "
                   f"(across member means), {stats.pooled_mean * 1e3:.3f} +- "
                   f"{stats.pooled_std * 1e3:.3f} mm (pooled points)")
    if csv_path is not None:
        write_report_csv(reports, csv_path)
    return result.exit_code


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and return its exit code: 0 complete, 1 unassociated entities, 2 error"""
    try:
        code = cli.main(args=list(argv) if argv is not None else None,
                        prog_name=settings.app_name, standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return 2
    except click.Abort:
        return 2
    finally:
        metrics.write()
    return code if isinstance(code, int) else 0


if __name__ == "__main__":
    sys.exit(cli_main())
