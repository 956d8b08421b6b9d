import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from timberdiff.pipelines import evaluate_assembly, evaluate_joints, preprocess, register, sample_targets
from timberdiff.schemas import (
    EvaluationLevel,
    ICPMethod,
    IcpParams,
    MetricBackend,
    MetricParams,
    OutlierParams,
    PipelineConfig,
    RansacParams,
    RegistrationMode,
    RegistrationParams,
)
from timberdiff.services.cad_model import Assembly, detect_joints, sample_mesh
from timberdiff.services.cloud import PointCloud
from timberdiff.services.registration import RigidTransform, save_transform
from timberdiff.tests.synthetic import box_beam, end_half_lap, log_frame, sampled_scan, scan_from_above
from timberdiff.utils.error_handling import IoError, PreconditionError, RegistrationFailed

pytestmark = pytest.mark.integration

ASSEMBLY_STAGES = ["downsample", "normals", "registration", "segmentation", "association",
                   "clustering", "metrics"]


def without_timestamp(result):
    document = json.loads(result.to_json())
    document["provenance"].pop("timestamp")
    return document


def spaced_beams(n=3, spacing=1.0):
    return tuple(box_beam(i, (0.4, 0.1, 0.1), origin=(0.0, i * spacing, 0.0)) for i in range(n))


class TestAssemblyPipeline:
    def test_exact_replica_has_zero_deviation(self, frame, exact_config):
        scan = sampled_scan(frame.beams, 2e4, seed=99)
        result = evaluate_assembly(scan, frame, exact_config)

        beam_reports = result.reports_at("beam")
        assert [r.entity for r in beam_reports] == ["beam0", "beam1", "beam2", "beam3"]
        assert all(r.mean <= 1e-6 for r in beam_reports)
        assert result.reports_at("assembly")[0].n_points == sum(r.n_points for r in beam_reports)
        assert result.member_statistics.n_members == 4
        assert result.unassociated == []
        assert result.exit_code == 0

    def test_point_conservation(self, frame, exact_config):
        result = evaluate_assembly(sampled_scan(frame.beams, 2e4, seed=99), frame, exact_config)
        assert result.unused_segment_points >= 0
        used = sum(r.n_points for r in result.reports_at("beam"))
        assert used + result.residue_size + result.unused_segment_points == result.registered_points

    def test_stage_order(self, box, exact_config):
        scan = sample_mesh(box.faces, 2e4, seed=4)
        result = evaluate_assembly(scan, Assembly("one", (box,)), exact_config)
        assert result.provenance.stages == ASSEMBLY_STAGES

    def test_outlier_stage_runs_when_enabled(self, box, exact_config):
        config = exact_config.model_copy(update={"outliers": OutlierParams()})
        result = evaluate_assembly(sample_mesh(box.faces, 2e4, seed=4), Assembly("one", (box,)), config)
        assert result.provenance.stages[:3] == ["downsample", "outlier_removal", "normals"]

    def test_deterministic_for_a_seed(self, box, exact_config):
        scan = sample_mesh(box.faces, 2e4, seed=4)
        assembly = Assembly("one", (box,))
        first = evaluate_assembly(scan, assembly, exact_config)
        second = evaluate_assembly(scan, assembly, exact_config)
        assert without_timestamp(first) == without_timestamp(second)

    @pytest.mark.parametrize("displacement", [0.002, 0.005, 0.010])
    def test_injected_displacement(self, exact_config, displacement):
        beams = spaced_beams()
        scan = scan_from_above(beams, 4e4, offsets={1: (0.0, 0.0, displacement)})
        result = evaluate_assembly(scan, Assembly("planks", beams), exact_config)

        means = {r.entity: r.mean for r in result.reports_at("beam")}
        assert means["beam1"] == pytest.approx(displacement, abs=max(5e-4, 0.1 * displacement))
        assert means["beam0"] <= 1e-6
        assert means["beam2"] <= 1e-6

    def test_missing_beam_sets_exit_code(self, frame, exact_config):
        scan = sampled_scan(frame.beams[:3], 2e4, seed=99)
        result = evaluate_assembly(scan, frame, exact_config)
        assert result.unassociated == ["beam3"]
        assert not result.complete
        assert result.exit_code == 1

    def test_colored_cloud_matches_beam_points(self, box, exact_config):
        result = evaluate_assembly(sample_mesh(box.faces, 2e4, seed=4), Assembly("one", (box,)),
                                   exact_config)
        assert result.colored_cloud.has_colors
        assert len(result.colored_cloud) == result.reports_at("beam")[0].n_points
        assert len(result.registered_cloud) == result.registered_points

    def test_threshold_categories(self, box, exact_config):
        config = exact_config.model_copy(update={"metrics": MetricParams(
            sample_density=4e4, beam_backend=MetricBackend.CLOUD_TO_MESH, threshold=0.001)})
        result = evaluate_assembly(sample_mesh(box.faces, 2e4, seed=4), Assembly("one", (box,)), config)
        report = result.reports_at("beam")[0]
        assert report.pass_fraction == 1.0
        assert report.categories.passed == report.n_points

    def test_empty_scan(self, box, exact_config):
        with pytest.raises(PreconditionError):
            evaluate_assembly(PointCloud.empty(), Assembly("one", (box,)), exact_config)

    def test_registration_failure_writes_diagnostics(self, box, rng, tmp_path):
        config = PipelineConfig(
            outliers=OutlierParams(enabled=False),
            registration=RegistrationParams(mode=RegistrationMode.RANSAC,
                                            ransac=RansacParams(max_iterations=200)),
            metrics=MetricParams(sample_density=4e4),
            output_dir=tmp_path,
        )
        scan = PointCloud(rng.uniform(10.0, 11.0, size=(300, 3)))
        with pytest.raises(RegistrationFailed) as excinfo:
            evaluate_assembly(scan, Assembly("one", (box,)), config)
        assert excinfo.value.stage == "registration"
        assert excinfo.value.diagnostic_path is not None
        assert (tmp_path / "registration_failure.json").exists()
        assert (tmp_path / "diagnostic_scan.ply").exists()

    def test_unwritable_diagnostics_directory(self, box, rng, tmp_path):
        taken = tmp_path / "taken"
        taken.write_text("not a directory")
        config = PipelineConfig(
            outliers=OutlierParams(enabled=False),
            registration=RegistrationParams(mode=RegistrationMode.RANSAC,
                                            ransac=RansacParams(max_iterations=200)),
            metrics=MetricParams(sample_density=4e4),
            output_dir=taken / "diagnostics",
        )
        scan = PointCloud(rng.uniform(10.0, 11.0, size=(300, 3)))
        with pytest.raises(IoError):
            evaluate_assembly(scan, Assembly("one", (box,)), config)


def noisy_lap_beam():
    """End half-lap: no rotation maps it onto itself"""
    return end_half_lap(0, 0.5, 0.1, lap=0.15, depth=0.05)


def ransac_config(seed=0):
    return PipelineConfig(
        voxel_size=0.005,
        outliers=OutlierParams(enabled=False),
        registration=RegistrationParams(mode=RegistrationMode.RANSAC,
                                        icp=IcpParams(method=ICPMethod.POINT_TO_PLANE)),
        metrics=MetricParams(sample_density=2.5e5, beam_backend=MetricBackend.CLOUD_TO_MESH),
        seed=seed,
    )


@pytest.mark.slow
class TestRegistrationOnNoisyScans:
    @pytest.mark.parametrize("trial", range(3))
    def test_recovers_a_random_pose(self, trial):
        rng = np.random.default_rng(500 + trial)
        truth = RigidTransform(Rotation.random(random_state=rng).as_matrix(), rng.uniform(-1, 1, 3))
        beam = noisy_lap_beam()
        scan = sampled_scan([beam], 2e5, seed=20 + trial, noise=5e-4).transformed(truth)
        config = ransac_config(seed=trial)

        stages = []
        cloud = preprocess(scan, config, stages)
        transform, quality = register(cloud, sample_targets([beam], config).cloud(), config, stages)

        assert set(quality) == {"coarse", "refine"}
        assert transform.rotation_error_deg(truth.inverse()) < 0.5
        assert transform.translation_error(truth.inverse()) < 1e-3

    def test_assembly_evaluation_with_ransac(self):
        beam = noisy_lap_beam()
        truth = RigidTransform(Rotation.from_euler("zyx", [75, -20, 130], degrees=True).as_matrix(),
                               [0.8, -0.3, 1.2])
        scan = sampled_scan([beam], 2e5, seed=31, noise=5e-4).transformed(truth)
        result = evaluate_assembly(scan, Assembly("one", (beam,)), ransac_config(seed=1))

        assert result.unassociated == []
        assert result.reports_at("beam")[0].mean < 1.5e-3
        t1 = RigidTransform(result.t1.rotation, result.t1.translation)
        assert t1.rotation_error_deg(truth.inverse()) < 0.5
        assert t1.translation_error(truth.inverse()) < 1e-3

    def test_thirteen_beam_frame_from_a_supplied_t1(self, tmp_path):
        frame = log_frame(13)
        truth = RigidTransform(Rotation.from_euler("xyz", [5, -8, 40], degrees=True).as_matrix(),
                               [2.0, -1.0, 0.3])
        scan = sampled_scan(frame.beams, 5e4, seed=13, noise=5e-4).transformed(truth)

        # 0.1 degree about the frame centre plus 1.5 mm along x
        centre = np.array([0.9, 2.4, 0.04])
        turn = Rotation.from_euler("z", 0.1, degrees=True).as_matrix()
        nudge = RigidTransform(turn, centre - turn @ centre + [0.0015, 0.0, 0.0])
        path = tmp_path / "t1.json"
        save_transform(nudge.compose(truth.inverse()), path)
        config = PipelineConfig(
            voxel_size=0.005,
            outliers=OutlierParams(enabled=False),
            registration=RegistrationParams(mode=RegistrationMode.EXTERNAL, transform_path=path,
                                            icp=IcpParams(method=ICPMethod.POINT_TO_PLANE)),
            metrics=MetricParams(sample_density=5e4, beam_backend=MetricBackend.CLOUD_TO_MESH),
        )
        result = evaluate_assembly(scan, frame, config)

        reports = result.reports_at("beam")
        assert len(reports) == 13
        assert result.unassociated == []
        assert all(r.mean <= 1.5e-3 for r in reports)


class TestJointPipeline:
    def test_exact_replica_has_zero_deviation(self, half_lap_beam, exact_config):
        beam = detect_joints(half_lap_beam)
        scan = sample_targets([beam], exact_config).cloud()
        result = evaluate_joints(scan, beam, exact_config, EvaluationLevel.PER_JOINT_FACE)

        assert result.unassociated == []
        assert result.levels == ["joint", "face"]
        joint = result.reports_at("joint")[0]
        assert joint.entity == "beam0/joint0"
        assert joint.mean <= 1e-6
        faces = result.reports_at("face")
        assert len(faces) == 3
        assert all(r.mean <= 1e-6 for r in faces)

        document = result.t2["beam0/joint0"]
        t2 = RigidTransform(document.rotation, document.translation)
        assert t2.rotation_error_deg(RigidTransform.identity()) < 1e-6
        assert t2.translation_error(RigidTransform.identity()) < 1e-6

    def test_deeper_lap_is_reported(self, lap_joint_beam, exact_config):
        """A lap cut 2 mm too deep shows up per joint; T2 takes the offset out of every face"""
        scan = sampled_scan([end_half_lap(0, 0.5, 0.1, lap=0.2, depth=0.032)], 1e5, seed=5)
        result = evaluate_joints(scan, lap_joint_beam, exact_config, EvaluationLevel.PER_JOINT_FACE)

        assert result.unassociated == []
        joint = result.reports_at("joint")[0]
        assert joint.mean == pytest.approx(0.002, abs=5e-4)
        faces = result.reports_at("face")
        assert len(faces) == 2
        assert all(face.mean < joint.mean for face in faces)

    def test_point_conservation(self, half_lap_beam, exact_config):
        beam = detect_joints(half_lap_beam)
        scan = sample_mesh(beam.faces, 4e4, seed=6)
        result = evaluate_joints(scan, beam, exact_config, EvaluationLevel.PER_JOINT)

        used = result.reports_at("joint")[0].n_points
        assert result.unused_segment_points > 0
        assert used + result.residue_size + result.unused_segment_points == result.registered_points

    def test_per_joint_level_skips_t2(self, half_lap_beam, exact_config):
        beam = detect_joints(half_lap_beam)
        scan = sample_targets([beam], exact_config).cloud()
        result = evaluate_joints(scan, beam, exact_config, EvaluationLevel.PER_JOINT)
        assert result.pipeline == "per_joint"
        assert result.t2 == {}
        assert result.reports_at("face") == []
        assert result.member_statistics.n_members == 1

    def test_detects_joints_when_untagged(self, half_lap_beam, exact_config):
        scan = sample_mesh(half_lap_beam.faces, 4e4, seed=6)
        result = evaluate_joints(scan, half_lap_beam, exact_config)
        assert len(result.reports_at("joint")) == 1

    def test_beam_without_joints(self, box, exact_config):
        scan = sample_mesh(box.faces, 2e4, seed=4)
        with pytest.raises(PreconditionError):
            evaluate_joints(scan, box, exact_config)
        config = exact_config.model_copy(update={"detect_joints": False})
        with pytest.raises(PreconditionError):
            evaluate_joints(scan, box, config)

    def test_missing_joint_is_unassociated(self, half_lap_beam, exact_config):
        beam = detect_joints(half_lap_beam)
        joint_face_ids = {jf.face_id for jf in beam.joint_faces}
        visible = [f for f in beam.faces if f.id not in joint_face_ids]
        scan = sample_mesh(visible, 4e4, seed=6)
        result = evaluate_joints(scan, beam, exact_config)
        assert result.reports_at("joint") == []
        assert result.unassociated == ["beam0/joint0"]
        assert result.exit_code == 1
