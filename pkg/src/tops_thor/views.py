"""Synthetic depth views of meshes: BVH ray casting, viewpoint sphere,
back-projection and grouping of viewpoints into front/side/top sets."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from . import meshio
from .pointcloud import OrientedBox, PointCloud

log = logging.getLogger(__name__)

FRONT, SIDE, TOP = "front", "side", "top"
GROUPS = (FRONT, SIDE, TOP)
# main viewing direction of each group, as an index into the box axes
GROUP_AXIS = {FRONT: 2, SIDE: 1, TOP: 0}


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        if len(f):
            a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
            area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
            f = f[area > 1e-15]
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @classmethod
    def load(cls, path):
        v, f = meshio.load_mesh(path)
        return cls(v, f)

    def save(self, path):
        meshio.write_ply(path, self.vertices, self.faces)

    @property
    def center(self):
        lo, hi = self.vertices.min(axis=0), self.vertices.max(axis=0)
        return (lo + hi) / 2

    @property
    def bounding_radius(self):
        return float(np.linalg.norm(self.vertices - self.center, axis=1).max())


@dataclass(frozen=True)
class CameraModel:
    fx: float = 80.0
    fy: float = 80.0
    cx: float = 31.5
    cy: float = 31.5
    width: int = 64
    height: int = 64
    depth_scale: float = 0.001

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.depth_scale <= 0:
            raise ValueError("focal lengths and depth_scale must be positive")

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.__dict__, indent=2))

    @classmethod
    def from_json(cls, path):
        d = json.loads(Path(path).read_text())
        return cls(**{k: d[k] for k in ("fx", "fy", "cx", "cy", "width", "height") if k in d},
                   depth_scale=float(d.get("depth_scale", 0.001)))


@dataclass(frozen=True)
class ViewPose:
    theta: float
    phi: float
    radius: float
    target: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (0 <= self.theta <= math.pi + 1e-12 and 0 <= self.phi < 2 * math.pi):
            raise ValueError("pose angles out of range")
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    @property
    def direction(self):
        """Unit vector from the target towards the camera."""
        st = math.sin(self.theta)
        return np.array([st * math.cos(self.phi), st * math.sin(self.phi), math.cos(self.theta)])

    @property
    def position(self):
        return np.asarray(self.target, dtype=np.float64) + self.radius * self.direction

    def world_from_camera(self):
        """Rotation whose columns are the camera x (right), y (down), z (forward) axes."""
        fwd = -self.direction
        up = np.array([0.0, 0.0, 1.0])
        if abs(fwd @ up) > 1 - 1e-9:
            up = np.array([1.0, 0.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return np.stack([right, down, fwd], axis=1)


# ---------------------------------------------------------------------------
# bounding volume hierarchy

@dataclass(frozen=True)
class BVH:
    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    v0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray


def build_bvh(mesh: TriangleMesh, leaf_size: int = 4) -> BVH:
    tri = mesh.vertices[mesh.faces]  # (F, 3, 3)
    tlo, thi = tri.min(axis=1), tri.max(axis=1)
    cent = tri.mean(axis=1)
    order = np.arange(len(tri))
    lo, hi, left, right, start, count = [], [], [], [], [], []

    def new_node(s, e):
        idx = order[s:e]
        lo.append(tlo[idx].min(axis=0))
        hi.append(thi[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(s)
        count.append(e - s)
        return len(lo) - 1

    if len(tri):
        stack = [(new_node(0, len(tri)), 0, len(tri))]
        while stack:
            node, s, e = stack.pop()
            if e - s <= leaf_size:
                continue
            c = cent[order[s:e]]
            axis = int(np.argmax(np.ptp(c, axis=0)))
            mid = (e - s) // 2
            part = np.argpartition(c[:, axis], mid, kind="introselect")
            order[s:e] = order[s:e][part]
            a = new_node(s, s + mid)
            b = new_node(s + mid, e)
            left[node], right[node], count[node] = a, b, 0
            stack.append((a, s, s + mid))
            stack.append((b, s + mid, e))
    t = tri[order]
    return BVH(
        lo=np.array(lo, dtype=np.float64).reshape(-1, 3),
        hi=np.array(hi, dtype=np.float64).reshape(-1, 3),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        start=np.array(start, dtype=np.int64),
        count=np.array(count, dtype=np.int64),
        v0=np.ascontiguousarray(t[:, 0]),
        e1=np.ascontiguousarray(t[:, 1] - t[:, 0]),
        e2=np.ascontiguousarray(t[:, 2] - t[:, 0]),
    )


@numba.njit(cache=True)
def _trace(origin, dirs, lo, hi, left, right, start, count, v0, e1, e2):
    n = dirs.shape[0]
    out = np.full(n, np.inf)
    if lo.shape[0] == 0:
        return out
    stack = np.empty(128, dtype=np.int64)
    for r in range(n):
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix = 1.0 / dx if dx != 0.0 else np.inf
        iy = 1.0 / dy if dy != 0.0 else np.inf
        iz = 1.0 / dz if dz != 0.0 else np.inf
        best = np.inf
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            # slab test
            t0 = -np.inf
            t1 = best
            miss = False
            for ax in range(3):
                o = origin[ax]
                inv = ix if ax == 0 else (iy if ax == 1 else iz)
                if inv == np.inf:
                    if o < lo[node, ax] or o > hi[node, ax]:
                        miss = True
                        break
                    continue
                a = (lo[node, ax] - o) * inv
                b = (hi[node, ax] - o) * inv
                if a > b:
                    a, b = b, a
                if a > t0:
                    t0 = a
                if b < t1:
                    t1 = b
            if miss or t0 > t1 or t1 < 0.0:
                continue
            if count[node] == 0:
                stack[sp] = left[node]
                sp += 1
                stack[sp] = right[node]
                sp += 1
                continue
            for k in range(start[node], start[node] + count[node]):
                # Moller-Trumbore, two sided
                px = dy * e2[k, 2] - dz * e2[k, 1]
                py = dz * e2[k, 0] - dx * e2[k, 2]
                pz = dx * e2[k, 1] - dy * e2[k, 0]
                det = e1[k, 0] * px + e1[k, 1] * py + e1[k, 2] * pz
                if abs(det) < 1e-15:
                    continue
                idet = 1.0 / det
                sx = origin[0] - v0[k, 0]
                sy = origin[1] - v0[k, 1]
                sz = origin[2] - v0[k, 2]
                u = (sx * px + sy * py + sz * pz) * idet
                if u < 0.0 or u > 1.0:
                    continue
                qx = sy * e1[k, 2] - sz * e1[k, 1]
                qy = sz * e1[k, 0] - sx * e1[k, 2]
                qz = sx * e1[k, 1] - sy * e1[k, 0]
                v = (dx * qx + dy * qy + dz * qz) * idet
                if v < 0.0 or u + v > 1.0:
                    continue
                t = (e2[k, 0] * qx + e2[k, 1] * qy + e2[k, 2] * qz) * idet
                if t > 1e-9 and t < best:
                    best = t
        out[r] = best
    return out


def pixel_rays(cam: CameraModel):
    """Camera-frame ray directions with unit z, one per pixel (row-major)."""
    v, u = np.mgrid[0:cam.height, 0:cam.width]
    d = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones(u.shape)], axis=-1)
    return d.reshape(-1, 3)


def render_depth(mesh: TriangleMesh, pose: ViewPose, cam: CameraModel, bvh: BVH | None = None) -> np.ndarray:
    """16-bit depth image (units of ``cam.depth_scale``) of the nearest surface
    along each pixel ray; 0 where nothing is hit."""
    if len(mesh.faces) == 0:
        return np.zeros((cam.height, cam.width), dtype=np.uint16)
    if bvh is None:
        bvh = build_bvh(mesh)
    R = pose.world_from_camera()
    dirs = pixel_rays(cam) @ R.T
    t = _trace(pose.position, np.ascontiguousarray(dirs), bvh.lo, bvh.hi, bvh.left, bvh.right,
               bvh.start, bvh.count, bvh.v0, bvh.e1, bvh.e2)
    # unit-z rays: the hit parameter is the depth along the optical axis
    depth = np.where(np.isfinite(t), np.round(t / cam.depth_scale), 0)
    depth = np.clip(depth, 0, np.iinfo(np.uint16).max).astype(np.uint16)
    depth = depth.reshape(cam.height, cam.width)
    if not depth.any():
        log.warning("mesh not visible from pose theta=%.3f phi=%.3f", pose.theta, pose.phi)
    return depth


def viewpoint_grid(radius: float, step: float = math.pi / 36, dedupe_poles: bool = False,
                   target=(0.0, 0.0, 0.0)) -> list[ViewPose]:
    if radius <= 0:
        raise ValueError("radius must be positive")
    n_theta = int(round(math.pi / step)) + 1
    n_phi = int(round(2 * math.pi / step))
    poses = []
    for i in range(n_theta):
        theta = min(i * step, math.pi)
        pole = i == 0 or i == n_theta - 1
        for k in range(n_phi):
            if dedupe_poles and pole and k > 0:
                break
            poses.append(ViewPose(theta, k * step, radius, tuple(target)))
    return poses


def default_radius(mesh: TriangleMesh) -> float:
    return 2.0 * mesh.bounding_radius + 0.3


def backproject(depth, cam: CameraModel, mask=None, return_pixels: bool = False):
    """Camera-frame point cloud of masked, nonzero depth pixels."""
    depth = np.asarray(depth)
    valid = depth > 0
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    rows, cols = np.nonzero(valid)
    z = depth[rows, cols].astype(np.float64) * cam.depth_scale
    pts = np.stack([z * (cols - cam.cx) / cam.fx, z * (rows - cam.cy) / cam.fy, z], axis=1)
    cloud = PointCloud(pts)
    if return_pixels:
        return cloud, np.stack([rows, cols], axis=1)
    return cloud


@dataclass
class ViewSets:
    front: list = field(default_factory=list)
    side: list = field(default_factory=list)
    top: list = field(default_factory=list)

    def __getitem__(self, group):
        return getattr(self, group)

    def items(self):
        return [(g, self[g]) for g in GROUPS]


def view_groups(direction, box: OrientedBox, tie_deg: float = 10.0) -> set[str]:
    """Groups whose main viewing axis (either sign) is closest to ``direction``,
    including all groups within ``tie_deg`` of the closest."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    ang = {g: math.degrees(math.acos(min(1.0, abs(float(d @ box.axes[GROUP_AXIS[g]]))))) for g in GROUPS}
    best = min(ang.values())
    return {g for g in GROUPS if ang[g] <= best + tie_deg + 1e-9}


def classify_views(views, canonical_box: OrientedBox, tie_deg: float = 10.0) -> ViewSets:
    """Split ``(pose, cloud)`` pairs into front/side/top sets (possibly overlapping)."""
    sets = ViewSets()
    for pose, cloud in views:
        direction = pose.position - canonical_box.center
        for g in view_groups(direction, canonical_box, tie_deg):
            sets[g].append((pose, cloud))
    return sets


def write_depth_png(path, depth, depth_scale):
    from PIL import Image

    Image.fromarray(np.asarray(depth, dtype=np.uint16)).save(path)
    Path(str(path) + ".json").write_text(json.dumps({"depth_scale": depth_scale}))


def read_depth_png(path):
    """Return ``(depth uint16, depth_scale or None)``."""
    from PIL import Image

    with Image.open(path) as im:
        depth = np.array(im)
    if depth.ndim != 2:
        raise ValueError(f"{path}: depth image must be single channel")
    meta = Path(str(path) + ".json")
    scale = json.loads(meta.read_text()).get("depth_scale") if meta.exists() else None
    return depth.astype(np.uint16), scale
