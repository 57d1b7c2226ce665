"""Test-time recognition: occlusion detection, curvature flow, model-set
selection heuristics, slice-count routing and invalid-prediction elimination."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .descriptor import HIGH_END, LOW_END, TopsDescriptor, TopsParams, compute_tops, tilt_for_slicing
from .library import ClassifierLibrary
from .pointcloud import (DegenerateSegmentError, PointCloud, PreprocessParams, ViewNormalization,
                         normalize_view, preprocess)
from .views import FRONT, GROUPS, SIDE, TOP, CameraModel, backproject

log = logging.getLogger(__name__)

# face of the normalized box perpendicular to axis i
AXIS_FACE = {2: FRONT, 1: SIDE, 0: TOP}
FACE_AXIS = {v: k for k, v in AXIS_FACE.items()}

NONE, MODERATE, HEAVY = "none", "moderate", "heavy"


@dataclass(frozen=True)
class SceneFrame:
    depth: np.ndarray
    mask: np.ndarray
    camera: CameraModel

    def __post_init__(self):
        if np.shape(self.depth) != np.shape(self.mask):
            raise ValueError("depth and mask dimensions differ")

    @property
    def labels(self):
        return [int(v) for v in np.unique(self.mask) if v > 0]


@dataclass(frozen=True)
class OcclusionResult:
    occluded: bool
    boundary: np.ndarray  # (m, 2) pixel (row, col)
    contour_count: int
    degenerate: bool = False


_OFFSETS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]


def _shifted(a, dr, dc, fill):
    out = np.full_like(a, fill)
    h, w = a.shape
    out[max(0, -dr):h - max(0, dr), max(0, -dc):w - max(0, dc)] = \
        a[max(0, dr):h - max(0, -dr), max(0, dc):w - max(0, -dc)]
    return out


def detect_occlusion(frame: SceneFrame, label: int, threshold: float = 0.01,
                     min_pixels: int = 10) -> OcclusionResult:
    """An instance is occluded when enough of its contour pixels touch another
    instance that is closer to the camera."""
    mask = np.asarray(frame.mask)
    depth = np.asarray(frame.depth).astype(np.int64)
    inst = mask == label
    n_pix = int(inst.sum())
    if n_pix == 0:
        raise KeyError(f"label {label} not in mask")
    contour = np.zeros_like(inst)
    boundary = np.zeros_like(inst)
    for dr, dc in _OFFSETS:
        nlab = _shifted(mask, dr, dc, 0)
        ndep = _shifted(depth, dr, dc, 0)
        contour |= inst & (nlab != label)
        boundary |= inst & (nlab > 0) & (nlab != label) & (ndep > 0) & (ndep < depth)
    # pixels on the image border are contour pixels too
    contour[0, :] |= inst[0, :]
    contour[-1, :] |= inst[-1, :]
    contour[:, 0] |= inst[:, 0]
    contour[:, -1] |= inst[:, -1]
    boundary &= contour
    n_contour = int(contour.sum())
    pix = np.argwhere(boundary)
    if n_pix < min_pixels:
        return OcclusionResult(False, pix, n_contour, degenerate=True)
    occluded = n_contour > 0 and len(pix) >= threshold * n_contour
    return OcclusionResult(bool(occluded), pix, n_contour)


# ---------------------------------------------------------------------------
# face areas and relations

@dataclass(frozen=True)
class FaceAreas:
    front: float
    side: float
    top: float

    def __post_init__(self):
        if min(self.front, self.side, self.top) < 0:
            raise ValueError("areas must be non-negative")

    @classmethod
    def of_points(cls, points):
        e = np.ptp(np.asarray(points).reshape(-1, 3), axis=0)
        return cls(float(e[0] * e[1]), float(e[0] * e[2]), float(e[1] * e[2]))

    def as_tuple(self):
        return (self.front, self.side, self.top)

    def __getitem__(self, face):
        return getattr(self, face)

    def relations(self, tolerance: float = 0.2):
        a = self.as_tuple()
        return {(i, j): relation(a[i], a[j], tolerance) for i in range(3) for j in range(i + 1, 3)}


def relation(a, b, tolerance: float = 0.2) -> str:
    """'>' / '<' when a and b differ by more than ``tolerance`` of the larger one, else '='."""
    big = max(abs(a), abs(b))
    if abs(a - b) > tolerance * big:
        return ">" if a > b else "<"
    return "="


def occlusion_degree(unoccluded: FaceAreas, observed: FaceAreas, occluded: bool | None = None,
                     tolerance: float = 0.2) -> str:
    """Heavy when any pairwise area relation of the canonical object fails for
    the observed areas, moderate when all hold but the object is occluded."""
    if occluded is None:
        occluded = not np.allclose(unoccluded.as_tuple(), observed.as_tuple(), rtol=1e-12, atol=0)
    canon, seen = unoccluded.relations(tolerance), observed.relations(tolerance)
    if any(canon[k] != seen[k] for k in canon):
        return HEAVY
    return MODERATE if occluded else NONE


# ---------------------------------------------------------------------------
# curvature and curvature flow

def _knn(points, k):
    k = min(k, len(points))
    tree = cKDTree(points)
    _, idx = tree.query(points, k=k)
    return idx.reshape(len(points), k)


def curvatures(points, k: int = 20) -> np.ndarray:
    """Surface variation lambda_min / (l1 + l2 + l3) of every point's k-NN covariance."""
    pts = np.asarray(points, dtype=np.float64)
    nb = pts[_knn(pts, k)]
    d = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", d, d) / nb.shape[1]
    ev = np.linalg.eigvalsh(cov)
    total = ev.sum(axis=1)
    out = np.zeros(len(pts))
    ok = total > 1e-300
    out[ok] = np.clip(ev[ok, 0], 0, None) / total[ok]
    return out


def curvature(index: int, cloud, k: int = 20) -> float:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    if len(pts) <= k:
        raise ValueError("cloud must have more than k points")
    _, idx = cKDTree(pts).query(pts[index], k=k)
    nb = pts[idx]
    d = nb - nb.mean(axis=0)
    ev = np.linalg.eigvalsh(d.T @ d / k)
    return 0.0 if ev.sum() <= 1e-300 else float(max(ev[0], 0.0) / ev.sum())


def estimate_normals(points, k: int = 20, viewpoint=None) -> np.ndarray:
    """PCA normals oriented towards ``viewpoint`` (or away from the centroid)."""
    pts = np.asarray(points, dtype=np.float64)
    nb = pts[_knn(pts, k)]
    d = nb - nb.mean(axis=1, keepdims=True)
    _, vecs = np.linalg.eigh(np.einsum("nki,nkj->nij", d, d))
    n = vecs[:, :, 0]
    ref = (np.asarray(viewpoint, dtype=np.float64) - pts) if viewpoint is not None else (pts - pts.mean(axis=0))
    flip = np.einsum("ni,ni->n", n, ref) < 0
    n[flip] *= -1
    return n


@dataclass
class SurfaceClusters:
    members: dict  # face -> indices into the cloud
    normals: dict  # face -> outward unit normal of the box face
    scores: dict  # face -> IQR of |flow|, or None when too few points
    flow: np.ndarray = field(default_factory=lambda: np.zeros(0))


def curvature_gradients(points, curv, k: int = 20) -> np.ndarray:
    """Least-squares gradient of curvature over each point's neighborhood
    (minimum-norm solution, so directions without spread get zero)."""
    pts = np.asarray(points, dtype=np.float64)
    idx = _knn(pts, k)
    D = pts[idx] - pts[:, None, :]
    c = curv[idx] - curv[:, None]
    pinv = np.linalg.pinv(D, rcond=1e-6)
    return np.einsum("nij,nj->ni", pinv, c)


def curvature_flow_scores(normalized: PointCloud, k: int = 20, viewpoint=None,
                          min_points: int = 10) -> SurfaceClusters:
    """Cluster points onto the three box faces by normal direction and score
    each surface by the interquartile range of its absolute curvature flow.

    The flow of a point on the face with normal axis n is the n-component of
    the fitted curvature gradient, i.e. the change of curvature that the
    constancy relation attributes to motion along the face normal.
    """
    pts = normalized.points
    normals = normalized.normals if normalized.normals is not None else estimate_normals(pts, k, viewpoint)
    axis = np.argmax(np.abs(normals), axis=1)
    curv = curvatures(pts, k)
    grad = curvature_gradients(pts, curv, k)
    flow = grad[np.arange(len(pts)), axis]
    members, face_normals, scores = {}, {}, {}
    for ax, face in AXIS_FACE.items():
        idx = np.flatnonzero(axis == ax)
        members[face] = idx
        sign = 1.0 if len(idx) == 0 or normals[idx, ax].mean() >= 0 else -1.0
        face_normals[face] = sign * np.eye(3)[ax]
        if len(idx) < min_points:
            scores[face] = None
        else:
            q75, q25 = np.percentile(np.abs(flow[idx]), [75, 25])
            scores[face] = float(q75 - q25)
    return SurfaceClusters(members, face_normals, scores, flow)


# ---------------------------------------------------------------------------
# model-set selection

ALL_SETS = frozenset(GROUPS)


def _greater(a, b, tol):
    return relation(a, b, tol) == ">"


def select_model_sets(areas: FaceAreas, scores: dict | None, primary_face: str,
                      tolerance: float = 0.2) -> frozenset:
    """Model sets to query given the box face areas, surface flow scores
    (face -> score or None) and the face in direct view of the camera."""
    others = [f for f in GROUPS if f != primary_face]
    a = areas[primary_face]
    if all(relation(areas[f], areas[g], tolerance) == "=" for i, f in enumerate(GROUPS) for g in GROUPS[i + 1:]):
        return frozenset({FRONT})
    above = sum(_greater(areas[f], a, tolerance) for f in others)
    below = sum(_greater(a, areas[f], tolerance) for f in others)
    if above == 0 and below > 0:
        return frozenset({FRONT, SIDE})
    if below == 0 and above > 0:
        return frozenset({SIDE, TOP})
    # neither the largest nor the smallest: curvature flow decides
    scores = scores or {}
    mine = scores.get(primary_face)
    rest = [scores.get(f) for f in others if scores.get(f) is not None]
    if mine is None or not rest:
        return ALL_SETS
    if mine < min(rest):
        return frozenset({SIDE, TOP})
    return frozenset({FRONT, SIDE})


def primary_face(norm: ViewNormalization, camera_position) -> str:
    """Face of the normalized box whose outward normal points most directly at
    the camera."""
    cam = norm.apply(np.asarray(camera_position, dtype=np.float64)[None])[0]
    centroid = norm.cloud.points.mean(axis=0)
    d = cam - centroid
    return AXIS_FACE[int(np.argmax(np.abs(d)))]


def prediction_is_valid(class_areas, observed_primary_area: float, tolerance: float = 0.2) -> bool:
    """A face of the visible part cannot be substantially larger than the
    largest face of the predicted object's minimum-volume box."""
    if class_areas is None:
        return True
    return relation(observed_primary_area, max(class_areas), tolerance) != ">"


# ---------------------------------------------------------------------------
# recognition

@dataclass(frozen=True)
class RecognitionConfig:
    tops: TopsParams = field(default_factory=TopsParams)
    preprocess: PreprocessParams = field(default_factory=PreprocessParams)
    tolerance: float = 0.2
    use_heuristics: bool = True
    curvature_k: int = 20
    min_face_points: int = 10
    occlusion_threshold: float = 0.01
    min_instance_pixels: int = 10


@dataclass
class Recognition:
    label: str
    probability: float
    n_s: int
    occluded: bool
    model_sets: list
    model_index: int
    low_confidence: bool = False
    trace: list = field(default_factory=list)
    occluded_end: str | None = None
    primary_face: str | None = None

    def to_record(self):
        return {
            "label": self.label,
            "probability": round(float(self.probability), 6),
            "n_s": int(self.n_s),
            "occluded": bool(self.occluded),
            "occluded_end": self.occluded_end,
            "selected_sets": list(self.model_sets),
            "model_index": int(self.model_index),
            "primary_face": self.primary_face,
            "low_confidence": bool(self.low_confidence),
            "elimination": self.trace,
        }


def occluded_end_of(norm: ViewNormalization, boundary_points) -> str:
    """End (low/high x) of the normalized cloud holding most occlusion-boundary points."""
    x = norm.apply(boundary_points)[:, 0]
    mid = np.ptp(norm.cloud.points[:, 0]) / 2
    low = int((x < mid).sum())
    return LOW_END if low > len(x) - low else HIGH_END


def classify_normalized(norm: ViewNormalization, library: ClassifierLibrary, config: RecognitionConfig,
                        occluded: bool = False, occluded_end: str | None = None,
                        camera_position=None, descriptor: TopsDescriptor | None = None) -> Recognition:
    """Recognize a view-normalized cloud (points already scaled). A precomputed
    ``descriptor`` replaces the one derived from ``norm``."""
    desc = descriptor or compute_tops(norm.cloud, config.tops, occluded_end if occluded else None)
    n_s = desc.n_s
    k = n_s if occluded else library.max_slices
    areas = FaceAreas.of_points(norm.cloud.points)
    face = primary_face(norm, camera_position) if camera_position is not None else None

    if config.use_heuristics and face is not None:
        scores = None
        probe = select_model_sets(areas, {}, face, config.tolerance)
        if probe == ALL_SETS:  # middle area: needs curvature flow
            cam = norm.apply(np.asarray(camera_position, dtype=np.float64)[None])[0]
            scores = curvature_flow_scores(norm.cloud, config.curvature_k, cam, config.min_face_points).scores
        sets = select_model_sets(areas, scores, face, config.tolerance)
    else:
        sets = ALL_SETS
    ordered = [g for g in GROUPS if g in sets]

    votes = []
    for g in ordered:
        p = library.model(g, k).predict_proba(desc.vector)
        c = int(np.argmax(p))
        label = library.class_names[c]
        valid = True
        if face is not None and len(ordered) > 1:
            valid = prediction_is_valid(library.class_face_areas.get(label), areas[face], config.tolerance)
        votes.append({"set": g, "label": label, "probability": float(p[c]), "valid": valid})
    pool = [v for v in votes if v["valid"]]
    low_conf = not pool
    best = max(pool or votes, key=lambda v: v["probability"])
    return Recognition(best["label"], best["probability"], n_s, occluded, ordered, k, low_conf, votes,
                       occluded_end if occluded else None, face)


def recognize(cloud: PointCloud, library: ClassifierLibrary, config: RecognitionConfig = RecognitionConfig(),
              occluded: bool = False, boundary_points=None, camera_position=(0.0, 0.0, 0.0)) -> Recognition:
    """Recognize one object from its camera-frame cloud (meters)."""
    library.check(config.tops)
    scaled = preprocess(cloud, config.preprocess)
    norm = normalize_view(scaled)
    s = config.preprocess.scale_factor
    end = None
    if occluded:
        end = HIGH_END
        if boundary_points is not None and len(boundary_points):
            end = occluded_end_of(norm, np.asarray(boundary_points) * s)
    cam = None if camera_position is None else np.asarray(camera_position, dtype=np.float64) * s
    return classify_normalized(norm, library, config, occluded, end, cam)


def recognize_frame(frame: SceneFrame, library: ClassifierLibrary,
                    config: RecognitionConfig = RecognitionConfig()) -> list[dict]:
    """JSON-ready records for every instance of a frame, in label order."""
    library.check(config.tops)
    records = []
    for label in frame.labels:
        occ = detect_occlusion(frame, label, config.occlusion_threshold, config.min_instance_pixels)
        cloud = backproject(frame.depth, frame.camera, frame.mask == label)
        rec = {"instance": label}
        if len(cloud) == 0:
            rec.update(label=None, error="no valid depth")
            records.append(rec)
            continue
        bmask = np.zeros(frame.mask.shape, dtype=bool)
        if len(occ.boundary):
            bmask[occ.boundary[:, 0], occ.boundary[:, 1]] = True
        bpts = backproject(frame.depth, frame.camera, bmask).points
        try:
            res = recognize(cloud, library, config, occ.occluded, bpts)
        except DegenerateSegmentError as exc:
            rec.update(label=None, error=f"degenerate segment: {exc}")
            records.append(rec)
            continue
        rec.update(res.to_record())
        records.append(rec)
    return records


def trailing_slice_mask(norm: ViewNormalization, params: TopsParams, fraction: float) -> np.ndarray:
    """Synthetic occlusion: mask keeping all but the top ``fraction`` of the
    slices (at least one slice dropped, never all)."""
    aligned = tilt_for_slicing(norm.cloud, params.alpha).points
    band = np.floor(aligned[:, 2] / params.slice.sigma1).astype(np.int64)
    n = int(band.max()) + 1
    drop = min(max(int(round(fraction * n)), 1), n - 1) if n > 1 else 0
    return band < n - drop
