import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from timberdiff.services.cad_model import sample_mesh
from timberdiff.services.cloud import (
    CloudFormat,
    PointCloud,
    SpatialIndex,
    estimate_normals,
    load_cloud,
    remove_statistical_outliers,
    save_cloud,
    voxel_downsample,
)
from timberdiff.utils.error_handling import (
    DegenerateNeighborhood,
    InvalidParameter,
    IoError,
    LengthMismatch,
    ParseError,
)


def test_point_cloud_rejects_bad_normals():
    """Normals must be unit length or exactly zero"""
    points = np.zeros((2, 3))
    with pytest.raises(InvalidParameter):
        PointCloud(points, np.array([[0, 0, 2.0], [0, 0, 1.0]]))
    with pytest.raises(LengthMismatch):
        PointCloud(points, np.array([[0, 0, 1.0]]))

    cloud = PointCloud(points, np.array([[0, 0, 0.0], [0, 0, 1.0]]))
    assert cloud.degenerate_mask.tolist() == [True, False]


def test_point_cloud_is_immutable(plane_cloud):
    with pytest.raises(ValueError):
        plane_cloud.points[0, 0] = 1.0


def test_load_xyz(tmp_path):
    """Three-line XYZ file gives three points"""
    path = tmp_path / "tri.xyz"
    path.write_text("0 0 0\n1 0 0\n0 1 0\n")
    cloud = load_cloud(path)
    assert len(cloud) == 3
    assert not cloud.has_normals
    np.testing.assert_array_equal(cloud.points[1], [1, 0, 0])


def test_load_empty_xyz(tmp_path):
    path = tmp_path / "empty.xyz"
    path.write_text("")
    assert load_cloud(path).is_empty


def test_load_xyz_reports_line_of_bad_record(tmp_path):
    path = tmp_path / "bad.xyz"
    path.write_text("0 0 0\n# comment\n1 0\n")
    with pytest.raises(ParseError) as excinfo:
        load_cloud(path)
    assert excinfo.value.line == 3


def test_load_missing_file(tmp_path):
    with pytest.raises(IoError):
        load_cloud(tmp_path / "nope.ply")


def test_unknown_extension(tmp_path):
    with pytest.raises(InvalidParameter):
        load_cloud(tmp_path / "cloud.las")


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip_with_normals_and_colors(tmp_path, rng, binary):
    points = rng.uniform(-5, 5, size=(1000, 3))
    normals = rng.normal(size=(1000, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    colors = rng.integers(0, 256, size=(1000, 3)) / 255.0
    cloud = PointCloud(points, normals, colors)

    path = tmp_path / "cloud.ply"
    save_cloud(cloud, path, binary=binary)
    loaded = load_cloud(path)

    np.testing.assert_allclose(loaded.points, points, atol=1e-7)
    np.testing.assert_allclose(loaded.normals, normals, atol=1e-7)
    np.testing.assert_allclose(loaded.colors, colors, atol=1e-9)


def test_binary_ply_cube_is_bitwise_equal(tmp_path, cube_corners):
    normals = cube_corners.points - 0.5
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    cloud = cube_corners.with_normals(normals)
    path = tmp_path / "cube.ply"
    save_cloud(cloud, path, CloudFormat.PLY)

    loaded = load_cloud(path)
    assert len(loaded) == 8
    assert loaded.has_normals
    assert np.array_equal(loaded.points, cloud.points)


def test_xyz_round_trip(tmp_path, rng):
    cloud = PointCloud(rng.uniform(size=(100, 3)))
    path = tmp_path / "cloud.xyz"
    save_cloud(cloud, path)
    np.testing.assert_allclose(load_cloud(path).points, cloud.points, atol=1e-7)


def test_xyz_drops_colors_with_warning(tmp_path, log_messages):
    cloud = PointCloud(np.zeros((2, 3)), colors=np.ones((2, 3)))
    path = tmp_path / "colored.xyz"
    save_cloud(cloud, path)
    assert not load_cloud(path).has_colors
    assert any("colors" in m for m in log_messages)


def test_save_empty_cloud(tmp_path):
    path = tmp_path / "empty.ply"
    save_cloud(PointCloud.empty(), path)
    assert load_cloud(path).is_empty


def test_save_into_missing_directory(tmp_path):
    with pytest.raises(IoError):
        save_cloud(PointCloud.empty(), tmp_path / "missing" / "cloud.ply")


def test_truncated_binary_ply(tmp_path, rng):
    path = tmp_path / "cloud.ply"
    save_cloud(PointCloud(rng.uniform(size=(10, 3))), path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(ParseError):
        load_cloud(path)


class TestSpatialIndex:
    def test_knn_matches_brute_force(self, rng):
        points = rng.uniform(size=(300, 3))
        queries = rng.uniform(size=(50, 3))
        dist, idx = SpatialIndex(points).knn(queries, 5)

        brute = np.linalg.norm(queries[:, None] - points[None], axis=2)
        order = np.argsort(brute, axis=1, kind="stable")[:, :5]
        np.testing.assert_array_equal(idx, order)
        np.testing.assert_allclose(dist, np.take_along_axis(brute, order, axis=1), atol=1e-12)

    def test_ties_go_to_lower_index(self):
        points = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0]])
        _, idx = SpatialIndex(points).knn(np.zeros((1, 3)), 2)
        assert idx[0].tolist() == [0, 1]

    def test_k_out_of_range(self, cube_corners):
        with pytest.raises(InvalidParameter):
            SpatialIndex(cube_corners).knn(np.zeros((1, 3)), 9)

    def test_radius_and_pairs(self, cube_corners):
        index = SpatialIndex(cube_corners)
        assert index.radius(np.zeros(3), 1.01).tolist() == [0, 1, 2, 4]
        pairs = index.pairs(1.01)
        assert len(pairs) == 12
        assert np.all(pairs[:, 0] < pairs[:, 1])


class TestVoxelDownsample:
    def test_single_voxel_centroid(self, cube_corners):
        out = voxel_downsample(cube_corners, 3.0)
        assert len(out) == 1
        np.testing.assert_allclose(out.points[0], [0.5, 0.5, 0.5])

    def test_one_point_per_voxel(self, cube_corners):
        out = voxel_downsample(cube_corners, 0.5)
        assert len(out) == 8
        assert {tuple(p) for p in out.points} == {tuple(p) for p in cube_corners.points}

    def test_matches_brute_force_binning(self, rng):
        points = rng.uniform(size=(100_000, 3))
        out = voxel_downsample(PointCloud(points), 0.1)
        assert len(out) <= 1000

        keys = np.floor((points - points.min(axis=0)) / 0.1).astype(int)
        bins = {}
        for key, p in zip(map(tuple, keys), points):
            bins.setdefault(key, []).append(p)
        expected = np.array([np.mean(bins[k], axis=0) for k in sorted(bins)])
        np.testing.assert_allclose(out.points, expected, atol=1e-12)

    def test_idempotent_with_fixed_anchor(self, rng):
        cloud = PointCloud(rng.uniform(size=(5000, 3)))
        once = voxel_downsample(cloud, 0.05, anchor=np.zeros(3))
        twice = voxel_downsample(once, 0.05, anchor=np.zeros(3))
        np.testing.assert_allclose(twice.points, once.points, atol=1e-12)

    def test_normals_are_renormalised(self):
        normals = np.array([[1.0, 0, 0], [0, 1.0, 0]])
        out = voxel_downsample(PointCloud(np.zeros((2, 3)), normals), 1.0)
        np.testing.assert_allclose(out.normals[0], [np.sqrt(0.5), np.sqrt(0.5), 0])

    def test_invalid_voxel(self, cube_corners):
        with pytest.raises(InvalidParameter):
            voxel_downsample(cube_corners, 0.0)


class TestOutlierRemoval:
    def test_far_point_removed(self):
        g = np.arange(10) * 0.01
        x, y = np.meshgrid(g, g, indexing="ij")
        points = np.column_stack([x.ravel(), y.ravel(), np.zeros(100)])
        points = np.vstack([points, [[0.05, 0.05, 1.0]]])
        kept, removed = remove_statistical_outliers(PointCloud(points), 10, 2.0)
        assert removed.tolist() == [100]
        assert len(kept) == 100

    def test_clean_grid_untouched(self, plane_cloud):
        kept, removed = remove_statistical_outliers(plane_cloud, 8, 10.0)
        assert len(removed) == 0
        assert len(kept) == len(plane_cloud)

    def test_too_few_points(self):
        with pytest.raises(InvalidParameter):
            remove_statistical_outliers(PointCloud(np.zeros((5, 3))), 10, 2.0)


class TestNormals:
    def test_plane_normals(self, rng):
        points = np.column_stack([rng.uniform(size=(500, 2)), np.zeros(500)])
        cloud = estimate_normals(PointCloud(points), 12)
        np.testing.assert_allclose(np.abs(cloud.normals[:, 2]), 1.0, atol=1e-6)

    def test_tree_orientation_is_consistent_on_a_plane(self, rng):
        points = np.column_stack([rng.uniform(size=(500, 2)), np.zeros(500)])
        normals = estimate_normals(PointCloud(points), 12).normals
        assert np.all(normals[:, 2] > 0) or np.all(normals[:, 2] < 0)

    def test_closed_surface_normals_face_outwards(self, box):
        samples = sample_mesh(box.faces, 2e4, seed=2)
        estimated = estimate_normals(PointCloud(samples.points), 15).normals
        agreement = np.einsum("ij,ij->i", estimated, samples.normals)
        on_face = np.abs(agreement) > 0.5
        assert on_face.mean() > 0.8
        assert np.all(agreement[on_face] > 0)

    def test_orientation_follows_a_rigid_motion(self, box):
        samples = sample_mesh(box.faces, 2e4, seed=2)
        rotation = Rotation.from_euler("xyz", [160, -35, 70], degrees=True).as_matrix()
        moved = PointCloud(samples.points @ rotation.T + [1.0, -2.0, 0.5])
        still = estimate_normals(PointCloud(samples.points), 15).normals
        turned = estimate_normals(moved, 15).normals
        on_face = np.abs(np.einsum("ij,ij->i", still, samples.normals)) > 0.9
        assert np.all(np.einsum("ij,ij->i", still[on_face] @ rotation.T, turned[on_face]) > 0.9)

    def test_sphere_normals_face_hint(self, rng):
        points = rng.normal(size=(2000, 3))
        points /= np.linalg.norm(points, axis=1, keepdims=True)
        cloud = estimate_normals(PointCloud(points), 15, orientation_hint=np.zeros(3))
        assert np.all(np.einsum("ij,ij->i", cloud.normals, -points) > 0.99)

    def test_collinear_neighbourhood_flagged(self, log_messages):
        points = np.column_stack([np.arange(10) * 0.1, np.zeros(10), np.zeros(10)])
        cloud = estimate_normals(PointCloud(points), 3)
        assert cloud.degenerate_mask.all()
        assert any("degenerate" in m for m in log_messages)
        with pytest.raises(DegenerateNeighborhood):
            estimate_normals(PointCloud(points), 3, strict=True)

    def test_too_few_points(self, cube_corners):
        with pytest.raises(InvalidParameter):
            estimate_normals(cube_corners, 20)
