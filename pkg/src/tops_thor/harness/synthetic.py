"""Rendered training/test views of meshes and the azimuth-interleaved split."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..pointcloud import PreprocessParams, min_volume_obb
from ..views import (CameraModel, TriangleMesh, ViewPose, ViewSets, backproject, build_bvh,
                     classify_views, default_radius, render_depth, viewpoint_grid)

log = logging.getLogger(__name__)


@dataclass
class RenderedView:
    pose: ViewPose
    depth: np.ndarray
    cloud: object  # camera-frame PointCloud

    @property
    def azimuth_index(self):
        return int(round(self.pose.phi / (math.pi / 36)))


def render_views(mesh: TriangleMesh, camera: CameraModel = CameraModel(), step: float = math.pi / 36,
                 radius: float | None = None, dedupe_poles: bool = True, min_points: int = 10):
    """Depth images and back-projected clouds over the viewpoint sphere.
    Views with fewer than ``min_points`` valid pixels are skipped."""
    mesh = TriangleMesh(mesh.vertices - mesh.center, mesh.faces)
    radius = radius or default_radius(mesh)
    bvh = build_bvh(mesh)
    out = []
    for pose in viewpoint_grid(radius, step, dedupe_poles):
        depth = render_depth(mesh, pose, camera, bvh)
        cloud = backproject(depth, camera)
        if len(cloud) < min_points:
            continue
        out.append(RenderedView(pose, depth, cloud))
    return mesh, out


def split_views(views, step: float = math.pi / 36):
    """Even azimuth steps train, odd ones test; poles go to training."""
    train, test = [], []
    for v in views:
        k = int(round(v.pose.phi / step))
        pole = v.pose.theta < 1e-9 or abs(v.pose.theta - math.pi) < 1e-9
        (train if pole or k % 2 == 0 else test).append(v)
    return train, test


def group_views(mesh: TriangleMesh, views, tie_deg: float = 10.0) -> ViewSets:
    box = min_volume_obb(mesh.vertices)
    return classify_views([(v.pose, v.cloud) for v in views], box, tie_deg)


def canonical_areas(mesh: TriangleMesh, prep: PreprocessParams = PreprocessParams()):
    box = min_volume_obb(mesh.vertices * prep.scale_factor)
    return box.face_areas()
