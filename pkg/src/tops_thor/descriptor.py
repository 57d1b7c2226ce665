"""TOPS descriptor: the vectorized persistence images of the z slices of a
tilted, normalized cloud, stacked and zero padded to a fixed slice count."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .filtration import SliceParams, compute_anchors, slice_cloud, zero_dim_pd
from .pimage import PiParams, pd_to_pi, vectorize
from .pointcloud import DegenerateSegmentError, PointCloud

log = logging.getLogger(__name__)

LOW_END = "low"
HIGH_END = "high"


@dataclass(frozen=True)
class TopsParams:
    slice: SliceParams = field(default_factory=SliceParams)
    pi: PiParams = field(default_factory=PiParams)
    alpha: float = math.pi / 4
    max_slices: int = 7

    def __post_init__(self):
        if not 0 <= self.alpha <= math.pi / 2:
            raise ValueError("alpha must lie in [0, pi/2]")
        if self.max_slices < 1:
            raise ValueError("max_slices must be >= 1")

    @property
    def block_size(self):
        return self.pi.size

    @property
    def length(self):
        return self.max_slices * self.block_size

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        sl = SliceParams(**d.pop("slice", {}))
        pi = dict(d.pop("pi", {}))
        for key in ("resolution", "birth_range", "persistence_range"):
            if key in pi:
                pi[key] = tuple(pi[key])
        return cls(slice=sl, pi=PiParams(**pi), **d)


@dataclass(frozen=True)
class TopsDescriptor:
    vector: np.ndarray
    n_s: int
    diagrams: tuple = ()

    def truncated(self, k, block_size):
        return TopsDescriptor(truncate(self.vector, k, block_size), min(self.n_s, k), self.diagrams[:k])


def truncate(vector, k, block_size):
    """Zero every slice block with index >= k."""
    out = np.array(vector, dtype=np.float64, copy=True)
    out[..., k * block_size:] = 0.0
    return out


def _first_octant(pts):
    return pts - pts.min(axis=0)


def tilt_for_slicing(normalized: PointCloud, alpha: float) -> PointCloud:
    """Rotate about y so the x axis rises by ``alpha`` above the x-y plane."""
    c, s = math.cos(alpha), math.sin(alpha)
    R = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
    return PointCloud(_first_octant(normalized.points @ R.T))


def reorient_for_occlusion(normalized: PointCloud, occluded_end: str | None) -> PointCloud:
    """Turn the cloud by pi about z when its occluded end is the low-x end, so
    that end does not become the first slice after tilting."""
    if occluded_end != LOW_END:
        return normalized
    pts = normalized.points * np.array([-1.0, -1.0, 1.0])
    return PointCloud(_first_octant(pts))


def compute_tops(normalized: PointCloud, params: TopsParams = TopsParams(),
                 occluded_end: str | None = None, keep_diagrams: bool = False) -> TopsDescriptor:
    if len(normalized) == 0:
        raise DegenerateSegmentError("empty cloud")
    cloud = reorient_for_occlusion(normalized, occluded_end)
    return tops_from_aligned(tilt_for_slicing(cloud, params.alpha), params, keep_diagrams)


def tops_from_aligned(aligned: PointCloud, params: TopsParams = TopsParams(),
                      keep_diagrams: bool = False) -> TopsDescriptor:
    """Descriptor of a cloud that is already tilted and in the first octant."""
    slices = slice_cloud(aligned, params.slice)
    if not slices:
        raise DegenerateSegmentError("no slices")
    n_s = len(slices)
    if n_s > params.max_slices:
        log.warning("object spans %d slices, keeping the first %d", n_s, params.max_slices)
        n_s = params.max_slices
    block = params.block_size
    vec = np.zeros(params.length)
    diagrams = []
    for slc in slices[:n_s]:
        if len(slc) == 0:
            diagrams.append(np.zeros((0, 2)))
            continue
        pd = zero_dim_pd(slc, compute_anchors(slc, params.slice), params.slice)
        if keep_diagrams:
            diagrams.append(pd)
        vec[slc.index * block:(slc.index + 1) * block] = vectorize(pd_to_pi(pd, params.pi))
    return TopsDescriptor(vec, n_s, tuple(diagrams) if keep_diagrams else ())


def _fmt(v):
    return "0" if v == 0 else repr(float(v))


def write_descriptor_csv(path, rows):
    """Rows of ``(label, n_s, vector)`` as ``label,n_s,v0,v1,...``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for label, n_s, vec in rows:
            w.writerow([label, int(n_s)] + [_fmt(v) for v in np.asarray(vec).ravel()])


def read_descriptor_csv(path):
    labels, ns, vecs = [], [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            labels.append(row[0])
            ns.append(int(row[1]))
            vecs.append(np.array(row[2:], dtype=np.float64))
    if not vecs:
        return [], np.zeros(0, dtype=np.int64), np.zeros((0, 0))
    return labels, np.array(ns, dtype=np.int64), np.stack(vecs)
