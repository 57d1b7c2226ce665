import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import box_surface, random_rotation
from tops_thor.pointcloud import (DegenerateSegmentError, PointCloud, PreprocessParams, min_volume_obb,
                                  mirror_augment, normalize_view, preprocess, radius_outlier_filter,
                                  view_normalize, voxel_downsample)

CUBE = np.array(list(itertools.product([0.0, 1.0], repeat=3)))


class TestPointCloud:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            PointCloud([[0, 0, np.nan]])

    def test_normals_checked(self):
        with pytest.raises(ValueError):
            PointCloud([[0, 0, 0]], normals=[[0, 0, 2.0]])
        with pytest.raises(ValueError):
            PointCloud([[0, 0, 0], [1, 1, 1]], normals=[[0, 0, 1.0]])

    @pytest.mark.parametrize("suffix", [".xyz", ".ply"])
    def test_round_trip(self, tmp_path, rng, suffix):
        pts = rng.random((50, 3))
        PointCloud(pts).save(tmp_path / f"c{suffix}")
        back = PointCloud.load(tmp_path / f"c{suffix}")
        np.testing.assert_allclose(back.points, pts, rtol=1e-6)


class TestPreprocess:
    def test_scaling_only(self):
        out = preprocess(PointCloud([[0.1, 0.2, 0.3]]))
        np.testing.assert_allclose(out.points, [[0.25, 0.5, 0.75]])

    def test_same_voxel_gives_centroid(self):
        pts = np.array([[0.001, 0.001, 0.001], [0.002, 0.003, 0.004]])
        out = voxel_downsample(pts, 0.03)
        np.testing.assert_allclose(out, pts.mean(axis=0, keepdims=True))

    def test_defaults(self):
        p = PreprocessParams()
        assert (p.scale_factor, p.voxel_size, p.outlier_radius, p.outlier_min_neighbors) == (2.5, 0.03, 5e-2, 220)

    def test_count_never_grows_and_deterministic(self, rng):
        cloud = PointCloud(rng.random((500, 3)) * 0.2)
        a, b = preprocess(cloud), preprocess(cloud)
        assert len(a) <= len(cloud)
        np.testing.assert_array_equal(a.points, b.points)

    def test_voxel_translation_commutes(self, rng):
        pts = rng.random((300, 3))
        shift = np.array([3, -2, 5]) * 0.03
        a = voxel_downsample(pts, 0.03) + shift
        b = voxel_downsample(pts + shift, 0.03)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_outlier_filter(self, rng):
        dense = rng.normal(0, 0.01, (300, 3))
        pts = np.vstack([dense, [[1.0, 1.0, 1.0]]])
        kept = radius_outlier_filter(pts, 0.05, 5)
        assert len(kept) == 300

    def test_empty_after_filtering_is_degenerate(self):
        params = PreprocessParams(outlier_removal_enabled=True)
        with pytest.raises(DegenerateSegmentError):
            preprocess(PointCloud([[0, 0, 0], [1, 1, 1]]), params)
        with pytest.raises(DegenerateSegmentError):
            preprocess(PointCloud(np.zeros((0, 3))))


def _check_box_invariants(box):
    A = box.axes
    np.testing.assert_allclose(A @ A.T, np.eye(3), atol=1e-6)
    assert np.linalg.det(A) == pytest.approx(1.0, abs=1e-6)
    assert box.extents[0] >= box.extents[1] >= box.extents[2] > 0


class TestObb:
    def test_unit_cube(self):
        box = min_volume_obb(CUBE)
        np.testing.assert_allclose(box.extents, [1, 1, 1], atol=1e-9)
        np.testing.assert_allclose(np.abs(box.axes), np.eye(3)[np.argmax(np.abs(box.axes), axis=1)], atol=1e-9)
        _check_box_invariants(box)

    def test_rotated_cube(self, rng):
        for _ in range(5):
            box = min_volume_obb(CUBE @ random_rotation(rng).T)
            np.testing.assert_allclose(box.extents, [1, 1, 1], atol=1e-6)
            _check_box_invariants(box)

    def test_box_2_1_half(self, rng):
        pts = box_surface(rng, (2, 1, 0.5)) @ random_rotation(rng).T
        box = min_volume_obb(pts)
        np.testing.assert_allclose(box.extents, [2, 1, 0.5], rtol=1e-3)
        _check_box_invariants(box)

    def test_not_larger_than_axis_aligned(self, rng):
        pts = rng.normal(size=(200, 3)) * [3, 1, 0.3]
        assert min_volume_obb(pts).volume <= np.prod(np.ptp(pts, axis=0)) + 1e-12

    def test_rigid_motion_invariance(self, rng):
        pts = rng.normal(size=(300, 3)) * [2, 1, 0.4]
        v0 = min_volume_obb(pts).volume
        for _ in range(3):
            moved = pts @ random_rotation(rng).T + rng.normal(size=3)
            assert min_volume_obb(moved).volume == pytest.approx(v0, rel=1e-3)

    def test_planar_input_is_flagged(self, rng):
        pts = np.c_[rng.random((30, 2)), np.zeros(30)]
        box = min_volume_obb(pts)
        assert box.degenerate and box.extents[2] == pytest.approx(1e-6)

    def test_collinear_input(self):
        pts = np.outer(np.linspace(0, 1, 10), [1.0, 2.0, 3.0])
        box = min_volume_obb(pts)
        assert box.degenerate
        assert box.extents[0] == pytest.approx(np.sqrt(14))


class TestViewNormalize:
    def test_idempotent(self, rng):
        pts = box_surface(rng, (2, 1, 0.5), 600) @ random_rotation(rng).T
        once = view_normalize(PointCloud(pts))
        twice = view_normalize(once)
        np.testing.assert_allclose(twice.points, once.points, atol=1e-6)

    def test_translation_only(self, rng):
        pts = box_surface(rng, (2, 1, 0.5), 400)
        a = view_normalize(PointCloud(pts))
        b = view_normalize(PointCloud(pts - 5.0))
        np.testing.assert_allclose(a.points, b.points, atol=1e-6)
        assert a.points.min() == pytest.approx(0.0, abs=1e-9)

    def test_first_octant_and_extent_order(self, rng):
        pts = rng.normal(size=(400, 3)) * [0.3, 2.0, 1.0] @ random_rotation(rng).T
        out = view_normalize(PointCloud(pts))
        np.testing.assert_allclose(out.points.min(axis=0), 0, atol=1e-9)
        e = np.ptp(out.points, axis=0)
        assert e[0] >= e[1] - 1e-4 and e[1] >= e[2] - 1e-4

    def test_transform_reproduces_cloud(self, rng):
        pts = rng.normal(size=(200, 3))
        n = normalize_view(PointCloud(pts))
        np.testing.assert_allclose(n.apply(pts), n.cloud.points, atol=1e-9)
        np.testing.assert_allclose(n.rotation @ n.rotation.T, np.eye(3), atol=1e-9)


class TestMirror:
    def test_eight_variants(self, rng):
        assert len(mirror_augment(PointCloud(rng.random((20, 3))))) == 8

    def test_symmetric_cloud(self):
        pts = CUBE * [2, 1, 0.5]
        for v in mirror_augment(PointCloud(pts)):
            assert {tuple(p) for p in np.round(v.points, 9)} == {tuple(p) for p in np.round(pts, 9)}

    def test_l_shape_distinct(self):
        leg = np.array([[x, 0.0, 0.0] for x in np.linspace(0, 2, 9)] + [[0.0, y, 0.0] for y in np.linspace(0, 1, 5)])
        pts = np.vstack([leg, leg + [0, 0, 0.2], [[2.0, 0.0, 0.5]]])
        variants = [frozenset(map(tuple, np.round(v.points, 9))) for v in mirror_augment(PointCloud(pts))]
        assert len(set(variants)) == 8


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_normalized_min_corner_origin(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(100, 3)) * rng.uniform(0.2, 2, 3)
    out = view_normalize(PointCloud(pts))
    np.testing.assert_allclose(out.points.min(axis=0), 0, atol=1e-9)
