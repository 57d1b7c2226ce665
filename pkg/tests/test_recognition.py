import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import box_surface, random_rotation
from tops_thor.descriptor import TopsDescriptor, TopsParams
from tops_thor.library import ClassifierLibrary
from tops_thor.pointcloud import PointCloud, normalize_view
from tops_thor.recognition import (ALL_SETS, HEAVY, MODERATE, NONE, FaceAreas, RecognitionConfig, SceneFrame,
                                   classify_normalized, curvature, curvature_flow_scores, curvatures,
                                   detect_occlusion, occlusion_degree, primary_face, recognize_frame,
                                   relation, select_model_sets, trailing_slice_mask)
from tops_thor.views import FRONT, GROUPS, SIDE, TOP, CameraModel

CAM = CameraModel()


def frame(mask, depth):
    return SceneFrame(np.asarray(depth, dtype=np.uint16), np.asarray(mask, dtype=np.int32), CAM)


def square_scene(b_depth, edge=20):
    """Instance 1: a 101x101 square (400 contour pixels); instance 2 touches
    its left edge along ``edge`` rows."""
    mask = np.zeros((140, 140), dtype=np.int32)
    depth = np.zeros((140, 140), dtype=np.int32)
    mask[20:121, 20:121] = 1
    depth[20:121, 20:121] = 1000
    mask[40:40 + edge, 10:20] = 2
    depth[40:40 + edge, 10:20] = b_depth
    return frame(mask, depth)


class TestDetectOcclusion:
    def test_closer_neighbour_along_edge(self):
        res = detect_occlusion(square_scene(800), 1)
        assert res.contour_count == 400
        # 20 rows share the edge, plus one diagonal neighbour at each end
        assert len(res.boundary) == 22 and res.occluded

    def test_farther_neighbour(self):
        res = detect_occlusion(square_scene(1200), 1)
        assert not res.occluded and len(res.boundary) == 0

    def test_occluder_itself_is_not_occluded(self):
        assert not detect_occlusion(square_scene(800), 2).occluded

    def test_isolated(self):
        mask = np.zeros((30, 30), dtype=np.int32)
        mask[5:20, 5:20] = 1
        res = detect_occlusion(frame(mask, mask * 500), 1)
        assert not res.occluded and len(res.boundary) == 0

    def test_below_threshold(self):
        # 2 qualifying pixels out of 400 is 0.5%, under the 1% default
        mask = square_scene(800).mask.copy()
        depth = square_scene(800).depth.astype(np.int32)
        mask[mask == 2] = 0
        mask[60, 19] = 2
        depth[60, 19] = 800
        res = detect_occlusion(frame(mask, depth), 1)
        assert len(res.boundary) == 3 and not res.occluded
        assert detect_occlusion(frame(mask, depth), 1, threshold=0.005).occluded

    def test_tiny_instance_degenerate(self):
        mask = np.zeros((20, 20), dtype=np.int32)
        mask[5:7, 5:8] = 1
        mask[5:7, 8:10] = 2
        depth = np.where(mask == 1, 900, np.where(mask == 2, 100, 0))
        res = detect_occlusion(frame(mask, depth), 1)
        assert res.degenerate and not res.occluded

    def test_missing_label(self):
        with pytest.raises(KeyError):
            detect_occlusion(square_scene(800), 7)

    def test_mismatched_images(self):
        with pytest.raises(ValueError):
            SceneFrame(np.zeros((4, 4)), np.zeros((4, 5)), CAM)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 80), st.integers(1, 40))
    def test_monotone_in_boundary_pixels(self, edge, extra):
        before = detect_occlusion(square_scene(800, edge), 1)
        after = detect_occlusion(square_scene(800, min(edge + extra, 100)), 1)
        assert len(after.boundary) >= len(before.boundary)
        assert after.occluded or not before.occluded


class TestRelations:
    def test_relation(self):
        assert relation(2.0, 1.0) == ">" and relation(1.0, 2.0) == "<"
        assert relation(1.0, 1.19) == "=" and relation(1.0, 1.3) == "<"

    @pytest.mark.parametrize("observed,expected", [
        ((2.0, 1.0, 0.5), NONE),
        ((1.6, 0.9, 0.45), MODERATE),
        ((0.8, 1.0, 0.45), HEAVY),
    ])
    def test_occlusion_degree(self, observed, expected):
        assert occlusion_degree(FaceAreas(2.0, 1.0, 0.5), FaceAreas(*observed)) == expected

    def test_explicit_flag(self):
        assert occlusion_degree(FaceAreas(2.0, 1.0, 0.5), FaceAreas(2.0, 1.0, 0.5), occluded=True) == MODERATE

    @settings(max_examples=100, deadline=None)
    @given(st.tuples(*[st.floats(0.01, 10)] * 3), st.tuples(*[st.floats(0.01, 10)] * 3), st.booleans())
    def test_heavy_iff_a_relation_flips(self, canon, seen, occluded):
        c, s = FaceAreas(*canon), FaceAreas(*seen)
        flipped = any(c.relations()[k] != s.relations()[k] for k in c.relations())
        assert (occlusion_degree(c, s, occluded) == HEAVY) == flipped

    def test_negative_area(self):
        with pytest.raises(ValueError):
            FaceAreas(-1.0, 0.0, 0.0)

    def test_of_points(self):
        a = FaceAreas.of_points([[0, 0, 0], [2, 1, 0.5]])
        assert a.as_tuple() == (2.0, 1.0, 0.5)


def fibonacci_sphere(n, r=1.0):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return r * np.c_[np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)]


def plane_grid(n=40):
    u, v = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n))
    return np.c_[u.ravel(), v.ravel(), np.zeros(n * n)]


class TestCurvature:
    def test_plane(self):
        assert curvatures(plane_grid()).max() <= 1e-6

    def test_sphere_roughly_constant(self):
        c = curvatures(fibonacci_sphere(4000))
        assert 0 < c.mean() <= 1 / 3
        assert c.std() / c.mean() < 0.2

    def test_range(self, rng):
        c = curvatures(rng.random((300, 3)))
        assert c.min() >= 0 and c.max() <= 1 / 3 + 1e-12

    def test_single_point_matches_batch(self, rng):
        pts = rng.random((100, 3))
        assert curvature(7, PointCloud(pts)) == pytest.approx(curvatures(pts)[7], abs=1e-12)

    def test_coincident_neighbours(self):
        assert curvature(0, np.zeros((30, 3))) == 0.0

    def test_too_small_cloud(self):
        with pytest.raises(ValueError):
            curvature(0, np.zeros((5, 3)), k=20)


def cylinder_points(rng, r=0.3, h=1.0, n=6000):
    """Side and top cap of a cylinder with its axis along z."""
    n_cap = n // 4
    t = rng.uniform(0, 2 * np.pi, n - n_cap)
    side = np.c_[r * np.cos(t), r * np.sin(t), rng.uniform(0, h, n - n_cap)]
    rr, tt = r * np.sqrt(rng.random(n_cap)), rng.uniform(0, 2 * np.pi, n_cap)
    cap = np.c_[rr * np.cos(tt), rr * np.sin(tt), np.full(n_cap, h)]
    return np.vstack([side, cap])


class TestFlowScores:
    def test_plane_scores_zero(self):
        s = curvature_flow_scores(PointCloud(plane_grid()), viewpoint=[0.5, 0.5, 5])
        assert s.scores[FRONT] <= 1e-4
        assert s.scores[SIDE] is None and s.scores[TOP] is None

    def test_clusters_disjoint(self, rng):
        pts = box_surface(rng, (1.0, 0.6, 0.3), 1500)
        s = curvature_flow_scores(PointCloud(pts), viewpoint=[3, 3, 3])
        allidx = np.concatenate([s.members[f] for f in GROUPS])
        assert len(allidx) == len(np.unique(allidx)) == len(pts)
        assert all(v is None or v >= 0 for v in s.scores.values())

    def test_cylinder_cap_flatter_than_side(self, rng):
        s = curvature_flow_scores(PointCloud(cylinder_points(rng)))
        cap = s.scores[FRONT]
        assert cap < s.scores[SIDE] and cap < s.scores[TOP]

    def test_sphere_above_plane(self):
        sphere = fibonacci_sphere(3000)
        cap = sphere[sphere[:, 2] > 0.5]
        s_sphere = curvature_flow_scores(PointCloud(cap), viewpoint=[0, 0, 5])
        s_plane = curvature_flow_scores(PointCloud(plane_grid()), viewpoint=[0.5, 0.5, 5])
        assert s_sphere.scores[FRONT] > s_plane.scores[FRONT]


def _order_areas(order):
    """Face areas realizing a ranking; ``order`` lists faces from largest."""
    vals = dict(zip(order, (2.0, 1.0, 0.5)))
    return FaceAreas(vals[FRONT], vals[SIDE], vals[TOP])


class TestSelectModelSets:
    def test_examples(self):
        a = FaceAreas(2.0, 1.0, 0.5)
        assert select_model_sets(a, None, FRONT) == {FRONT, SIDE}
        assert select_model_sets(FaceAreas(1.0, 1.05, 0.95), None, TOP) == {FRONT}
        assert select_model_sets(a, {FRONT: 0.3, SIDE: 0.1, TOP: 0.2}, SIDE) == {SIDE, TOP}

    def test_minimum(self):
        assert select_model_sets(FaceAreas(2.0, 1.0, 0.5), None, TOP) == {SIDE, TOP}

    def test_middle_not_least_flow(self):
        scores = {FRONT: 0.05, SIDE: 0.1, TOP: 0.2}
        assert select_model_sets(FaceAreas(2.0, 1.0, 0.5), scores, SIDE) == {FRONT, SIDE}

    def test_middle_unavailable_scores(self):
        assert select_model_sets(FaceAreas(2.0, 1.0, 0.5), {SIDE: 0.1}, SIDE) == ALL_SETS
        assert select_model_sets(FaceAreas(2.0, 1.0, 0.5), None, SIDE) == ALL_SETS

    def test_exhaustive_table(self):
        """Every area ranking x primary face x flow ranking."""
        for order in itertools.permutations(GROUPS):
            areas = _order_areas(order)
            for face in GROUPS:
                for flow_order in itertools.permutations(GROUPS):
                    scores = {f: float(i) for i, f in enumerate(flow_order)}
                    got = select_model_sets(areas, scores, face)
                    if face == order[0]:
                        want = {FRONT, SIDE}
                    elif face == order[2]:
                        want = {SIDE, TOP}
                    else:
                        want = {SIDE, TOP} if flow_order[0] == face else {FRONT, SIDE}
                    assert got == want
                    assert got == select_model_sets(areas, dict(scores), face)

    @settings(max_examples=200, deadline=None)
    @given(st.tuples(*[st.floats(0, 5)] * 3), st.sampled_from(GROUPS),
           st.dictionaries(st.sampled_from(GROUPS), st.one_of(st.none(), st.floats(0, 1))))
    def test_nonempty_subset(self, areas, face, scores):
        got = select_model_sets(FaceAreas(*areas), scores, face)
        assert got and got <= ALL_SETS


# ---------------------------------------------------------------------------
# routing and elimination with spy classifiers

class Spy:
    def __init__(self, probs, group, k, calls):
        self.probs, self.group, self.k, self.calls = np.asarray(probs, float), group, k, calls

    def predict_proba(self, X):
        self.calls.append((self.group, self.k))
        return self.probs


def spy_library(per_group, areas=None, n_slices=7):
    calls = []
    sets = {g: [Spy(per_group[g], g, k, calls) for k in range(1, n_slices + 1)] for g in GROUPS}
    lib = ClassifierLibrary(sets, ["A", "B"], TopsParams().fingerprint(), areas or {})
    return lib, calls


@pytest.fixture
def box_norm(rng):
    pts = box_surface(rng, (0.5, 0.25, 0.12), 1500) @ random_rotation(rng).T
    return normalize_view(PointCloud(pts))


def fake_descriptor(n_s):
    return TopsDescriptor(np.zeros(TopsParams().length), n_s)


class TestRouting:
    def test_unoccluded_single_set(self, rng):
        cube = normalize_view(PointCloud(box_surface(rng, (0.3, 0.3, 0.3), 1500)))
        lib, calls = spy_library({FRONT: [0.2, 0.8], SIDE: [0.9, 0.1], TOP: [0.9, 0.1]})
        rec = classify_normalized(cube, lib, RecognitionConfig(), camera_position=[5, 0.1, 0.2],
                                  descriptor=fake_descriptor(5))
        assert rec.model_sets == [FRONT] and calls == [(FRONT, 7)]
        assert rec.label == "B" and rec.probability == pytest.approx(0.8)

    def test_unoccluded_largest_face(self, box_norm):
        lib, calls = spy_library({g: [0.3, 0.7] for g in GROUPS})
        cam = box_norm.cloud.points.mean(axis=0)
        cam = np.linalg.solve(box_norm.rotation, cam + [0, 0, 5] - box_norm.translation)
        rec = classify_normalized(box_norm, lib, RecognitionConfig(), camera_position=cam,
                                  descriptor=fake_descriptor(4))
        assert rec.primary_face == FRONT and rec.model_sets == [FRONT, SIDE]
        assert rec.model_index == 7 and set(calls) == {(FRONT, 7), (SIDE, 7)}
        assert rec.label == "B" and rec.probability == pytest.approx(0.7)

    def test_occluded_uses_n_s(self, box_norm):
        lib, calls = spy_library({g: [0.3, 0.7] for g in GROUPS})
        rec = classify_normalized(box_norm, lib, RecognitionConfig(use_heuristics=False), occluded=True,
                                  occluded_end="high", descriptor=fake_descriptor(3))
        assert rec.model_index == 3 and {k for _, k in calls} == {3}
        assert rec.to_record()["model_index"] == 3

    def test_elimination(self, box_norm):
        areas = {"A": [0.01, 0.005, 0.002], "B": [0.5, 0.2, 0.1]}
        lib, _ = spy_library({FRONT: [0.9, 0.1], SIDE: [0.4, 0.6], TOP: [0.45, 0.55]}, areas)
        cam = np.linalg.solve(box_norm.rotation, [0, 0, 9] - box_norm.translation)
        rec = classify_normalized(box_norm, lib, RecognitionConfig(use_heuristics=False), camera_position=cam,
                                  descriptor=fake_descriptor(7))
        assert rec.label == "B" and rec.probability == pytest.approx(0.6)
        assert [v["valid"] for v in rec.trace] == [False, True, True]
        assert not rec.low_confidence

    def test_all_invalid_is_low_confidence(self, box_norm):
        areas = {"A": [0.01, 0.005, 0.002], "B": [0.01, 0.005, 0.002]}
        lib, _ = spy_library({FRONT: [0.9, 0.1], SIDE: [0.4, 0.6], TOP: [0.45, 0.55]}, areas)
        cam = np.linalg.solve(box_norm.rotation, [0, 0, 9] - box_norm.translation)
        rec = classify_normalized(box_norm, lib, RecognitionConfig(use_heuristics=False), camera_position=cam,
                                  descriptor=fake_descriptor(7))
        assert rec.low_confidence and rec.label == "A"

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 7), st.booleans(), st.integers(0, 2 ** 32 - 1))
    def test_no_heuristics_queries_only_matching_index(self, n_s, occluded, seed):
        rng = np.random.default_rng(seed)
        norm = normalize_view(PointCloud(rng.normal(size=(200, 3)) * rng.uniform(0.1, 1, 3)))
        lib, calls = spy_library({g: [0.5, 0.5] for g in GROUPS})
        rec = classify_normalized(norm, lib, RecognitionConfig(use_heuristics=False), occluded=occluded,
                                  occluded_end="low", camera_position=rng.normal(size=3) * 5,
                                  descriptor=fake_descriptor(n_s))
        want = n_s if occluded else 7
        assert rec.model_index == want and {k for _, k in calls} == {want}
        assert rec.model_sets == list(GROUPS)


def test_primary_face_follows_camera(box_norm):
    centre = box_norm.cloud.points.mean(axis=0)
    for axis, face in ((2, FRONT), (1, SIDE), (0, TOP)):
        target = centre + 5 * np.eye(3)[axis]
        cam = np.linalg.solve(box_norm.rotation, target - box_norm.translation)
        assert primary_face(box_norm, cam) == face


def test_trailing_slice_mask(box_norm):
    params = TopsParams()
    keep = trailing_slice_mask(box_norm, params, 0.3)
    assert 0 < keep.sum() < len(keep)
    assert trailing_slice_mask(box_norm, params, 0.0).sum() < len(keep)


def test_recognize_frame_reports_bad_instances():
    mask = np.zeros((64, 64), dtype=np.int32)
    depth = np.zeros((64, 64), dtype=np.int32)
    mask[10:20, 10:20] = 1  # no depth at all
    lib, _ = spy_library({g: [0.5, 0.5] for g in GROUPS})
    recs = recognize_frame(frame(mask, depth), lib)
    assert recs == [{"instance": 1, "label": None, "error": "no valid depth"}]
