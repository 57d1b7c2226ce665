"""Topological descriptors of depth-camera point clouds for object recognition."""

from .descriptor import TopsDescriptor, TopsParams, compute_tops
from .pointcloud import PointCloud, PreprocessParams, normalize_view, preprocess, view_normalize

__all__ = ["PointCloud", "PreprocessParams", "TopsDescriptor", "TopsParams", "compute_tops",
           "normalize_view", "preprocess", "view_normalize"]
__version__ = "0.1.0"
