"""Point-cloud container, preprocessing, oriented bounding boxes and view
normalization."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from . import meshio

DEGENERATE_EXTENT = 1e-6


class DegenerateSegmentError(ValueError):
    """Raised when an object segment has no usable geometry left."""


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise ValueError("normals must align with points")
            if len(nrm) and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-6:
                raise ValueError("normals must be unit vectors")
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return len(self.points)

    @property
    def bounds(self):
        return self.points.min(axis=0), self.points.max(axis=0)

    def with_points(self, points):
        return PointCloud(points)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.suffix.lower() == ".ply":
            v, _, n = meshio.read_ply(path)
            if n is not None:
                norm = np.linalg.norm(n, axis=1, keepdims=True)
                n = np.where(norm > 0, n / np.where(norm > 0, norm, 1), n)
                if np.any(norm == 0):
                    n = None
            return cls(v, n)
        return cls(meshio.read_xyz(path))

    def save(self, path):
        path = Path(path)
        if path.suffix.lower() == ".ply":
            meshio.write_ply(path, self.points, normals=self.normals)
        else:
            meshio.write_xyz(path, self.points)


@dataclass(frozen=True)
class OrientedBox:
    center: np.ndarray
    axes: np.ndarray  # rows, descending extent, right-handed
    extents: np.ndarray
    degenerate: bool = False

    @property
    def volume(self):
        return float(np.prod(self.extents))

    def face_areas(self):
        """Areas seen when looking along axis 2, 1 and 0 (front, side, top)."""
        e = self.extents
        return float(e[0] * e[1]), float(e[0] * e[2]), float(e[1] * e[2])


@dataclass(frozen=True)
class PreprocessParams:
    scale_factor: float = 2.5
    voxel_size: float = 0.03
    outlier_radius: float = 5e-2
    outlier_min_neighbors: int = 220
    outlier_removal_enabled: bool = False

    def __post_init__(self):
        if min(self.scale_factor, self.voxel_size, self.outlier_radius) <= 0:
            raise ValueError("preprocess reals must be positive")
        if self.outlier_min_neighbors < 1:
            raise ValueError("outlier_min_neighbors must be >= 1")


def voxel_downsample(points, voxel):
    """One centroid per occupied voxel of a grid anchored at the origin.

    Output is ordered by voxel key so the result only depends on the point set
    (and summation order within a voxel).
    """
    if len(points) == 0:
        return points.reshape(0, 3)
    keys = np.floor(points / voxel).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    out = np.zeros((len(counts), 3))
    np.add.at(out, inv, points)
    return out / counts[:, None]


def radius_outlier_filter(points, radius, min_neighbors):
    """Keep points with at least ``min_neighbors`` other points within ``radius``."""
    if len(points) == 0:
        return points
    tree = cKDTree(points)
    counts = tree.query_ball_point(points, r=radius, return_length=True) - 1
    return points[counts >= min_neighbors]


def preprocess(cloud: PointCloud, params: PreprocessParams = PreprocessParams()) -> PointCloud:
    if len(cloud) == 0:
        raise DegenerateSegmentError("empty point cloud")
    pts = cloud.points * params.scale_factor
    pts = voxel_downsample(pts, params.voxel_size)
    if params.outlier_removal_enabled:
        pts = radius_outlier_filter(pts, params.outlier_radius, params.outlier_min_neighbors)
    if len(pts) == 0:
        raise DegenerateSegmentError("no points left after preprocessing")
    return PointCloud(pts)


# ---------------------------------------------------------------------------
# oriented bounding box

def _extents_of(pts, frames):
    """Box extents of ``pts`` in each frame; frames is (K, 3, 3) with rows as axes."""
    coords = np.einsum("kij,nj->kni", frames, pts)
    return coords.max(axis=1) - coords.min(axis=1)


def _rot_about(axis, angles):
    c, s = np.cos(angles), np.sin(angles)
    R = np.zeros((len(angles), 3, 3))
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    R[:, axis, axis] = 1.0
    R[:, i, i] = c
    R[:, j, j] = c
    R[:, i, j] = -s
    R[:, j, i] = s
    return R


def min_area_rect_angle(pts2d):
    """Angle in (-pi/4, pi/4] by which the minimum-area enclosing rectangle of a
    2D point set is rotated relative to the coordinate axes (rotating calipers
    over hull edges)."""
    pts2d = np.asarray(pts2d, dtype=np.float64)
    try:
        hull = pts2d[ConvexHull(pts2d).vertices]
    except (QhullError, ValueError):
        return 0.0
    edges = np.roll(hull, -1, axis=0) - hull
    ang = np.mod(np.arctan2(edges[:, 1], edges[:, 0]), np.pi / 2)
    ang = np.where(ang > np.pi / 4, ang - np.pi / 2, ang)
    ang = np.unique(np.concatenate([[0.0], ang]))
    c, s = np.cos(ang), np.sin(ang)
    u = hull @ np.stack([c, s])  # (H, K)
    v = hull @ np.stack([-s, c])
    area = np.ptp(u, axis=0) * np.ptp(v, axis=0)
    best = np.flatnonzero(area <= area.min() * (1 + 1e-12))
    # prefer the smallest rotation among equivalent optima
    return float(ang[best[np.argmin(np.abs(ang[best]))]])


def _face_frames(hull, hull_pts, max_faces=48):
    eq = hull.equations[:, :3]
    a, b, c = (hull.points[hull.simplices[:, k]] for k in range(3))
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    key = np.round(eq, 9)
    _, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    tot = np.bincount(inv, weights=area)
    first = np.zeros(len(tot), dtype=np.int64)
    first[inv[::-1]] = np.arange(len(inv))[::-1]
    order = np.argsort(-tot, kind="stable")[:max_faces]
    frames = []
    for g in order:
        n = eq[first[g]]
        n = n / np.linalg.norm(n)
        helper = np.eye(3)[np.argmin(np.abs(n))]
        u = np.cross(n, helper)
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        p2 = np.stack([hull_pts @ u, hull_pts @ v], axis=1)
        t = min_area_rect_angle(p2)
        c, s = np.cos(t), np.sin(t)
        frames.append(np.stack([c * u + s * v, -s * u + c * v, n]))
    return frames


_SEARCH_SCHEDULE = [np.deg2rad(10.0 ** -k) for k in range(0, 6)]


def _local_search(frame, pts):
    """Coordinate descent over +-10 steps about each box axis, step refined from
    1 degree down to 1e-5 degrees."""
    best_vol = float(np.prod(_extents_of(pts, frame[None])[0]))
    for step in _SEARCH_SCHEDULE:
        angles = step * np.arange(-10, 11)
        for _ in range(100):
            improved = False
            for axis in range(3):
                cand = _rot_about(axis, angles) @ frame
                vols = np.prod(_extents_of(pts, cand), axis=1)
                k = int(np.argmin(vols))
                if vols[k] < best_vol * (1 - 1e-13):
                    best_vol = float(vols[k])
                    frame = cand[k]
                    improved = True
            if not improved:
                break
    # re-orthonormalize accumulated products
    u, _, vt = np.linalg.svd(frame)
    return u @ vt


def _canonical_signs(axes):
    a0 = axes[0] * _sign_of(axes[0], 0)
    a1 = axes[1] * _sign_of(axes[1], 1)
    return np.stack([a0, a1, np.cross(a0, a1)])


def _sign_of(v, idx):
    if abs(v[idx]) > 1e-12:
        return 1.0 if v[idx] > 0 else -1.0
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    return 1.0 if v[nz[0]] > 0 else -1.0


def _finish_box(frame, pts, degenerate, floor):
    coords = pts @ frame.T
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    ext = hi - lo
    order = np.argsort(-ext, kind="stable")
    frame = frame[order]
    ext = ext[order]
    mid = ((lo + hi) / 2)[order]
    center = frame.T @ mid
    axes = _canonical_signs(frame)
    if np.any(ext < floor):
        degenerate = True
    ext = np.maximum(ext, floor)
    return OrientedBox(center=center, axes=axes, extents=ext, degenerate=degenerate)


def min_volume_obb(cloud, floor: float = DEGENERATE_EXTENT) -> OrientedBox:
    """Approximate minimum-volume oriented box.

    Candidates are the PCA frame and frames flush with the largest convex-hull
    facets (in-plane angle from rotating calipers); the best candidate is
    polished by a coarse-to-fine local rotation search.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) == 0:
        raise DegenerateSegmentError("cannot box an empty cloud")
    centered = pts - pts.mean(axis=0)
    _, evecs = np.linalg.eigh(centered.T @ centered)
    pca = evecs[:, ::-1].T.copy()
    try:
        if len(pts) < 4:
            raise QhullError("too few points")
        hull = ConvexHull(pts)
    except (QhullError, ValueError):
        # coplanar/collinear: best rectangle in the dominant plane
        p2 = np.stack([centered @ pca[0], centered @ pca[1]], axis=1)
        t = min_area_rect_angle(p2)
        c, s = np.cos(t), np.sin(t)
        frame = np.stack([c * pca[0] + s * pca[1], -s * pca[0] + c * pca[1], np.cross(pca[0], pca[1])])
        return _finish_box(frame, pts, True, floor)

    hull_pts = pts[hull.vertices]
    frames = [pca] + _face_frames(hull, hull_pts)
    stack = np.stack(frames)
    vols = np.prod(_extents_of(hull_pts, stack), axis=1)
    best = stack[int(np.argmin(vols))]
    best = _local_search(best, hull_pts)
    return _finish_box(best, pts, False, floor)


# ---------------------------------------------------------------------------
# view normalization

@dataclass(frozen=True)
class ViewNormalization:
    """Result of view normalization: ``cloud = points @ rotation.T + translation``."""

    cloud: PointCloud
    rotation: np.ndarray
    translation: np.ndarray
    box: OrientedBox
    degenerate: bool = False

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def apply_direction(self, vectors):
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    @property
    def extents(self):
        return np.ptp(self.cloud.points, axis=0)


def _rz(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rx(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _sorting_rotation(ext):
    """Signed permutation (det +1) that orders coordinate extents descending."""
    order = np.argsort(-ext, kind="stable")
    P = np.eye(3)[order]
    if np.linalg.det(P) < 0:
        P[2] *= -1
    return P


def normalize_view(cloud: PointCloud) -> ViewNormalization:
    pts = cloud.points
    box = min_volume_obb(cloud)
    R = box.axes.copy()
    q = pts @ R.T
    # fine alignment: 2D boxes of the x-y and y-z projections
    t = min_area_rect_angle(q[:, :2])
    R = _rz(-t) @ R
    q = pts @ R.T
    t = min_area_rect_angle(q[:, 1:])
    R = _rx(-t) @ R
    q = pts @ R.T
    P = _sorting_rotation(np.ptp(q, axis=0))
    R = P @ R
    q = pts @ R.T
    shift = -q.min(axis=0)
    out = q + shift
    out[np.abs(out) < 1e-12] = 0.0
    return ViewNormalization(PointCloud(out), R, shift, box, box.degenerate)


def view_normalize(cloud: PointCloud) -> PointCloud:
    """Rotate so the minimal-volume box is axis aligned (largest extent on x,
    smallest on z) and translate into the first octant."""
    return normalize_view(cloud).cloud


def to_first_octant(points):
    out = points - points.min(axis=0)
    return out


def mirror_augment(cloud: PointCloud) -> list[PointCloud]:
    """The 8 reflections of a normalized cloud about the coordinate planes through
    its box center, each shifted back into the first octant."""
    pts = cloud.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = (lo + hi) / 2
    out = []
    for signs in itertools.product((1.0, -1.0), repeat=3):
        m = center + (pts - center) * np.array(signs)
        out.append(PointCloud(m - m.min(axis=0)))
    return out


def face_areas(points):
    """Areas of the faces of an axis-aligned box, as (x*y, x*z, y*z)."""
    e = np.ptp(np.asarray(points), axis=0)
    return float(e[0] * e[1]), float(e[0] * e[2]), float(e[1] * e[2])
