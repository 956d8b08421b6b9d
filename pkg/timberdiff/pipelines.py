"""End-to-end evaluations: whole assembly, and per joint / per joint face of one beam."""
from __future__ import annotations

import hashlib
import json
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from timberdiff.config import settings
from timberdiff.schemas import (
    ColorMapMode,
    ErrorReport,
    EvaluationLevel,
    EvaluationResult,
    MetricBackend,
    PipelineConfig,
    Provenance,
    RegistrationMode,
    RegistrationQuality,
)
from timberdiff.services.cad_model import Assembly, Beam, MeshFace, detect_joints, sample_faces
from timberdiff.services.cloud import (
    PointCloud,
    estimate_normals,
    remove_statistical_outliers,
    save_cloud,
    voxel_downsample,
)
from timberdiff.services.metrics import (
    ColorMap,
    cloud_to_cloud_distances,
    cloud_to_mesh_distances,
    colorize,
    member_statistics,
    summarize,
)
from timberdiff.services.registration import (
    RegistrationResult,
    RigidTransform,
    compute_fpfh,
    evaluate_registration,
    icp_refine,
    load_transform,
    ransac_register,
)
from timberdiff.services.segmentation import (
    FaceRef,
    JointClouds,
    associate_segments,
    cluster_beams,
    extract_joint_cloud,
    multiply_used_segments,
    residue_indices,
    segment_by_normals,
)
from timberdiff.utils.error_handling import (
    ErrorContext,
    InsufficientPoints,
    IoError,
    JointNotDetected,
    NoConsensus,
    NoCorrespondences,
    PreconditionError,
    RegistrationFailed,
)
from timberdiff.utils.monitoring import PerformanceTracker, metrics, track_performance
from timberdiff.utils.seeding import Stream, derive_rng

PathLike = Union[str, Path]


@contextmanager
def _stage(name: str, stages: List[str], entity: Optional[str] = None) -> Iterator[None]:
    stages.append(name)
    logger.debug(f"Stage '{name}' started")
    with ErrorContext(name, entity), PerformanceTracker(metrics, name):
        yield


def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


@dataclass(frozen=True, eq=False)
class TargetModel:
    """Sampled CAD faces of the evaluated beams"""
    faces: Dict[FaceRef, PointCloud]

    def cloud(self, refs: Optional[Sequence[FaceRef]] = None) -> PointCloud:
        refs = sorted(self.faces) if refs is None else refs
        return PointCloud.concatenate([self.faces[r] for r in refs])

    def refs_of_beam(self, beam_id: int, joints_only: bool = False) -> List[FaceRef]:
        return [r for r in sorted(self.faces) if r.beam_id == beam_id
                and (r.joint_id is not None or not joints_only)]


def sample_targets(beams: Sequence[Beam], config: PipelineConfig) -> TargetModel:
    """One target cloud per beam face; joint faces are keyed by their joint references"""
    faces: Dict[FaceRef, PointCloud] = {}
    for beam in beams:
        sampled = sample_faces(beam, beam.faces, config.metrics.sample_density, config.seed)
        joint_refs = {jf.face_id: (joint.id, jf.id) for joint in beam.joints for jf in joint.faces}
        for face in beam.faces:
            joint_id, joint_face_id = joint_refs.get(face.id, (None, None))
            ref = FaceRef(beam.id, face.id, joint_id, joint_face_id)
            faces[ref] = sampled[face.id]
    return TargetModel(faces)


def preprocess(scan: PointCloud, config: PipelineConfig, stages: List[str]) -> PointCloud:
    """Down-sampling, outlier removal and normal estimation, in that order"""
    with _stage("downsample", stages):
        cloud = voxel_downsample(scan, config.voxel_size)
        metrics.record_points("downsample", len(cloud))
    if config.outliers.enabled:
        with _stage("outlier_removal", stages):
            if len(cloud) > config.outliers.k_neighbors:
                cloud, removed = remove_statistical_outliers(
                    cloud, config.outliers.k_neighbors, config.outliers.std_ratio)
                logger.info(f"Outlier removal dropped {len(removed)} points")
            metrics.record_points("outlier_removal", len(cloud))
    with _stage("normals", stages):
        if len(cloud) < config.normals.k_neighbors:
            raise InsufficientPoints(
                f"{len(cloud)} points left after preprocessing, "
                f"need at least {config.normals.k_neighbors}")
        cloud = estimate_normals(cloud, config.normals.k_neighbors)
    return cloud


def _dump_diagnostics(config: PipelineConfig, scan: PointCloud, target: PointCloud,
                      error: Exception, transform: Optional[RigidTransform] = None) -> Optional[str]:
    if config.output_dir is None:
        return None
    directory = Path(config.output_dir)
    path = directory / "registration_failure.json"
    moved = scan if transform is None else scan.transformed(transform)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        save_cloud(moved, directory / "diagnostic_scan.ply")
        save_cloud(target, directory / "diagnostic_target.ply")
        path.write_text(json.dumps({
            "error": f"{type(error).__name__}: {error}",
            "scan_points": len(scan),
            "target_points": len(target),
            "transform": None if transform is None else transform.to_document().model_dump(),
            "registration": config.registration.model_dump(mode="json"),
        }, indent=2), encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot write registration diagnostics to {directory}: {e}") from e
    logger.error(f"Registration failed; diagnostics written to {directory}")
    return str(path)


def register(cloud: PointCloud, target: PointCloud, config: PipelineConfig,
             stages: List[str]) -> Tuple[RigidTransform, Dict[str, RegistrationQuality]]:
    """T1 by the configured mode, optionally refined with ICP"""
    quality: Dict[str, RegistrationQuality] = {}
    options = config.registration
    target = voxel_downsample(target, config.voxel_size)

    with _stage("registration", stages):
        if options.mode == RegistrationMode.NONE:
            transform = RigidTransform.identity()
        elif options.mode == RegistrationMode.EXTERNAL:
            transform = load_transform(options.transform_path)
            logger.info(f"Using supplied T1 from {options.transform_path}")
        else:
            radius = config.feature_radius()
            # scan-like normals on both sides so the histograms are comparable
            feature_target = estimate_normals(target, min(config.normals.k_neighbors, len(target)))
            try:
                coarse = ransac_register(
                    cloud, target, compute_fpfh(cloud, radius), compute_fpfh(feature_target, radius),
                    config.ransac_params(), seed=derive_rng(config.seed, Stream.RANSAC))
            except (NoConsensus, InsufficientPoints) as e:
                raise RegistrationFailed(str(e), _dump_diagnostics(config, cloud, target, e)) from e
            transform = coarse.transform
            quality["coarse"] = _quality(coarse)
            metrics.record_fitness("coarse", coarse.fitness)

        if options.refine:
            try:
                fine = icp_refine(cloud, target, transform, config.icp_params())
            except NoCorrespondences as e:
                raise RegistrationFailed(
                    str(e), _dump_diagnostics(config, cloud, target, e, transform)) from e
            transform = fine.transform
            quality["refine"] = _quality(fine)
            metrics.record_fitness("refine", fine.fitness)
        elif options.mode != RegistrationMode.RANSAC:
            check = evaluate_registration(cloud, target, transform,
                                          config.icp_params().max_correspondence_distance)
            quality["supplied"] = _quality(check)
    return transform, quality


def _quality(result: RegistrationResult) -> RegistrationQuality:
    return RegistrationQuality(fitness=result.fitness, inlier_rmse=result.inlier_rmse,
                               iterations=result.iterations)


def _distances(cloud: PointCloud, backend: MetricBackend, faces: Sequence[MeshFace],
               target: PointCloud) -> np.ndarray:
    if backend == MetricBackend.CLOUD_TO_MESH:
        return cloud_to_mesh_distances(cloud, faces)
    return cloud_to_cloud_distances(cloud, target)


def _provenance(config: PipelineConfig, stages: List[str],
                inputs: Optional[Dict[str, str]]) -> Provenance:
    return Provenance(tool=settings.app_name, version=settings.version,
                      config=config.model_dump(mode="json"), inputs=dict(sorted((inputs or {}).items())),
                      stages=list(stages))


def _color_map(config: PipelineConfig) -> ColorMap:
    if config.metrics.colormap == ColorMapMode.FIXED:
        return ColorMap.default(config.metrics.colormap_bounds)
    return ColorMap.default()


@track_performance("evaluate_assembly")
def evaluate_assembly(scan: PointCloud, assembly: Assembly, config: Optional[PipelineConfig] = None,
                      inputs: Optional[Dict[str, str]] = None) -> EvaluationResult:
    """Register the scan, split it by beam and report per-beam deviations"""
    config = config or PipelineConfig.from_settings(settings)
    if scan.is_empty:
        raise PreconditionError("scan is empty")
    if not assembly.beams:
        raise PreconditionError("assembly has no beams")

    stages: List[str] = []
    cloud = preprocess(scan, config, stages)
    targets = sample_targets(assembly.beams, config)
    transform, quality = register(cloud, targets.cloud(), config, stages)
    registered = cloud.transformed(transform)

    with _stage("segmentation", stages):
        segments = segment_by_normals(
            registered, config.segmentation.angle_threshold,
            config.segmentation.k_neighbors, config.segmentation.min_segment_size,
            config.segmentation.curvature_factor)
    with _stage("association", stages):
        gate = config.segmentation.max_centroid_distance or \
            2.0 * max(beam.cross_section_diagonal() for beam in assembly.beams)
        associations = associate_segments(
            segments, list(targets.faces.items()), gate,
            config.segmentation.max_normal_angle, config.segmentation.lam)
    with _stage("clustering", stages):
        clusters = cluster_beams(associations, assembly, registered)

    reports: List[ErrorReport] = []
    unassociated: List[str] = []
    colored_parts, color_distances = [], []
    threshold = config.metrics.threshold
    with _stage("metrics", stages):
        for beam in assembly.beams:
            beam_cloud = clusters.clouds[beam.id]
            if beam_cloud.is_empty:
                unassociated.append(f"beam{beam.id}")
                continue
            refs = targets.refs_of_beam(beam.id)
            d = _distances(beam_cloud, config.metrics.beam_backend, beam.faces, targets.cloud(refs))
            reports.append(summarize(d, threshold, entity=f"beam{beam.id}", level="beam"))
            colored_parts.append(beam_cloud)
            color_distances.append(d)

        member_stats = None
        result_reports = list(reports)
        colored = None
        if reports:
            pooled = np.concatenate(color_distances)
            colored = colorize(PointCloud.concatenate(colored_parts), pooled, _color_map(config))
            _, clamped = _color_map(config).apply(pooled)
            overall = summarize(pooled, threshold, entity=assembly.name, level="assembly")
            result_reports.insert(0, overall.model_copy(update={"clamped": clamped}))
            member_stats = member_statistics(reports)

    used = sum(len(idx) for idx in clusters.indices.values())
    residue = len(residue_indices(segments, len(registered)))
    multiply_used = {
        str(index): [ref.label for ref in refs]
        for index, refs in multiply_used_segments(associations).items()
    }
    if multiply_used:
        logger.warning(f"{len(multiply_used)} segments are associated with several faces")
    if unassociated:
        logger.warning(f"Beams not found in the scan: {', '.join(unassociated)}")

    result = EvaluationResult(
        pipeline="assembly",
        levels=["assembly", "beam"],
        t1=transform.to_document(),
        registration=quality,
        reports=result_reports,
        member_statistics=member_stats,
        unassociated=unassociated,
        multiply_used_segments=multiply_used,
        registered_points=len(registered),
        residue_size=residue,
        unused_segment_points=len(registered) - used - residue,
        provenance=_provenance(config, stages, inputs),
    )
    result._registered = registered
    result._colored = colored
    logger.info(f"Assembly '{assembly.name}': {len(reports)} of {len(assembly.beams)} beams evaluated")
    return result


def _correspondence_rmse(cloud: PointCloud, target: PointCloud,
                         transform: Optional[RigidTransform] = None) -> float:
    moved = cloud if transform is None else cloud.transformed(transform)
    d = cloud_to_cloud_distances(moved, target)
    return float(np.sqrt(np.mean(d ** 2)))


@track_performance("evaluate_joints")
def evaluate_joints(scan: PointCloud, beam: Beam, config: Optional[PipelineConfig] = None,
                    level: EvaluationLevel = EvaluationLevel.PER_JOINT,
                    inputs: Optional[Dict[str, str]] = None) -> EvaluationResult:
    """Joint-level deviations of one beam.

    per_joint compares every extracted joint cloud with its CAD joint.
    per_joint_face additionally removes each joint's placement offset with a
    single ICP transform T2 and reports every face of the joint after it.
    """
    config = config or PipelineConfig.from_settings(settings)
    level = EvaluationLevel(level)
    if scan.is_empty:
        raise PreconditionError("scan is empty")
    if not beam.joints and config.detect_joints:
        beam = detect_joints(beam)
    if not beam.joints:
        raise PreconditionError(f"beam {beam.id} has no joints to evaluate")

    stages: List[str] = []
    cloud = preprocess(scan, config, stages)
    targets = sample_targets([beam], config)
    transform, quality = register(cloud, targets.cloud(), config, stages)
    registered = cloud.transformed(transform)

    with _stage("segmentation", stages):
        segments = segment_by_normals(
            registered, config.segmentation.angle_threshold,
            config.segmentation.k_neighbors, config.segmentation.min_segment_size,
            config.segmentation.curvature_factor)
    with _stage("association", stages):
        joint_refs = targets.refs_of_beam(beam.id, joints_only=True)
        gate = config.segmentation.max_centroid_distance or 2.0 * beam.cross_section_diagonal()
        associations = associate_segments(
            segments, [(r, targets.faces[r]) for r in joint_refs], gate,
            config.segmentation.max_normal_angle, config.segmentation.lam)
    with _stage("joint_extraction", stages):
        extracted = extract_joint_cloud(
            associations, registered, Assembly("beam", (beam,)), config.projection_tolerance)

    threshold = config.metrics.threshold
    backend = config.metrics.face_backend
    joint_reports: List[ErrorReport] = []
    face_reports: List[ErrorReport] = []
    unassociated: List[str] = []
    t2: Dict[str, RigidTransform] = {}
    colored_parts, color_distances = [], []

    with _stage("metrics", stages):
        for joint in beam.joints:
            label = f"beam{beam.id}/joint{joint.id}"
            refs = [r for r in joint_refs if r.joint_id == joint.id]
            joint_target = targets.cloud(refs)
            try:
                clouds = _joint_clouds(extracted, beam.id, joint.id)
            except JointNotDetected as e:
                logger.warning(str(e))
                unassociated.append(label)
                if level == EvaluationLevel.PER_JOINT_FACE:
                    unassociated.extend(r.label for r in refs)
                continue

            d = _distances(clouds.joint_cloud, backend, joint.faces, joint_target)
            joint_reports.append(summarize(d, threshold, entity=label, level="joint"))
            if level == EvaluationLevel.PER_JOINT:
                colored_parts.append(clouds.joint_cloud)
                color_distances.append(d)
                continue

            local = _fit_joint_transform(clouds.joint_cloud, joint_target, config)
            t2[label] = local
            for ref in refs:
                face_cloud = clouds.per_face_clouds.get(ref.joint_face_id)
                if face_cloud is None or face_cloud.is_empty:
                    unassociated.append(ref.label)
                    continue
                moved = face_cloud.transformed(local)
                face = joint.face(ref.joint_face_id)
                fd = _distances(moved, backend, [face], targets.faces[ref])
                face_reports.append(summarize(fd, threshold, entity=ref.label, level="face"))
                colored_parts.append(moved)
                color_distances.append(fd)

        colored = None
        if color_distances:
            colored = colorize(PointCloud.concatenate(colored_parts),
                               np.concatenate(color_distances), _color_map(config))

    joint_points = [c.indices for c in extracted.values()]
    used = len(np.unique(np.concatenate(joint_points))) if joint_points else 0
    residue = len(residue_indices(segments, len(registered)))
    levels = ["joint"] if level == EvaluationLevel.PER_JOINT else ["joint", "face"]
    members = face_reports if level == EvaluationLevel.PER_JOINT_FACE else joint_reports
    result = EvaluationResult(
        pipeline=level.value,
        levels=levels,
        t1=transform.to_document(),
        t2={k: v.to_document() for k, v in t2.items()},
        registration=quality,
        reports=joint_reports + face_reports,
        member_statistics=member_statistics(members) if members else None,
        unassociated=unassociated,
        multiply_used_segments={
            str(i): [r.label for r in refs]
            for i, refs in multiply_used_segments(associations).items()
        },
        registered_points=len(registered),
        residue_size=residue,
        unused_segment_points=len(registered) - used - residue,
        provenance=_provenance(config, stages, inputs),
    )
    result._registered = registered
    result._colored = colored
    logger.info(f"Beam {beam.id}: {len(joint_reports)} of {len(beam.joints)} joints evaluated "
                f"at level {level.value}")
    return result


def _joint_clouds(extracted: Dict[Tuple[int, int], JointClouds], beam_id: int,
                  joint_id: int) -> JointClouds:
    clouds = extracted.get((beam_id, joint_id))
    if clouds is None or clouds.joint_cloud.is_empty:
        raise JointNotDetected(f"no scan points extracted for beam{beam_id}/joint{joint_id}")
    return clouds


def _fit_joint_transform(joint_cloud: PointCloud, joint_target: PointCloud,
                         config: PipelineConfig) -> RigidTransform:
    """T2 for one joint; identity when ICP fails or does not lower the correspondence RMSE"""
    icp = config.icp_params()
    cap = max(icp.max_correspondence_distance, config.projection_tolerance)
    try:
        fit = icp_refine(joint_cloud, joint_target, RigidTransform.identity(),
                         icp.model_copy(update={"max_correspondence_distance": cap}))
    except (NoCorrespondences, InsufficientPoints) as e:
        logger.warning(f"T2 fit failed ({e}); using identity")
        return RigidTransform.identity()
    before = _correspondence_rmse(joint_cloud, joint_target)
    after = _correspondence_rmse(joint_cloud, joint_target, fit.transform)
    if after > before:
        logger.warning("T2 did not lower the joint correspondence RMSE; using identity")
        return RigidTransform.identity()
    return fit.transform
