"""Slicing of aligned clouds and the strip filtration whose 0-dimensional
persistence encodes each slice's shape.

Every slice is cut into strips of width ``sigma2`` along x. Each strip gets an
origin anchor (lowest y) and a termination anchor (highest y), lifted slightly
in z. Sublevel sets of the pairwise descriptor ``f`` then make every strip a
connected component that is born at its x position and dies when it reaches
the component formed by all termination anchors, so its lifetime is the
strip's y-extent.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .pointcloud import PointCloud


@dataclass(frozen=True)
class SliceParams:
    sigma1: float = 0.1
    sigma2: float = 2.5e-2
    eps1: float = 1e-6
    eps2: float = 3e-6

    def __post_init__(self):
        if self.sigma1 <= 0 or self.sigma2 <= 0 or self.eps1 <= 0 or self.eps2 <= 0:
            raise ValueError("slice parameters must be positive")
        if not 2 * self.eps1 < self.eps2:
            raise ValueError("need 2*eps1 < eps2")
        if not (self.eps2 < self.sigma1 and self.eps2 < self.sigma2):
            raise ValueError("anchor offset eps2 must stay inside a band")


@dataclass(frozen=True)
class Slice:
    index: int
    points: np.ndarray  # (m, 3), z == index * sigma1, x quantized to strip ends
    strips: np.ndarray  # (m,) strip index j of each point

    @property
    def strip_count(self):
        return int(len(np.unique(self.strips)))

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class AnchorSet:
    origins: np.ndarray
    terminations: np.ndarray
    strips: np.ndarray


def strip_x(j, sigma2):
    """Quantized x coordinate of strip ``j``."""
    return (np.asarray(j) + 1) * sigma2


def slice_cloud(aligned, params: SliceParams = SliceParams()) -> list[Slice]:
    pts = aligned.points if isinstance(aligned, PointCloud) else np.asarray(aligned, dtype=np.float64)
    if len(pts) == 0:
        return []
    band = np.floor(pts[:, 2] / params.sigma1).astype(np.int64)
    band = np.maximum(band, 0)
    top = int(band.max())
    order = np.argsort(band, kind="stable")
    bounds = np.searchsorted(band[order], np.arange(top + 2))
    slices = []
    for i in range(top + 1):
        members = pts[order[bounds[i]:bounds[i + 1]]].copy()
        j = np.maximum(np.floor(members[:, 0] / params.sigma2).astype(np.int64), 0)
        members[:, 0] = strip_x(j, params.sigma2)
        members[:, 2] = i * params.sigma1
        slices.append(Slice(i, members, j))
    return slices


def compute_anchors(slc: Slice, params: SliceParams = SliceParams()) -> AnchorSet:
    if len(slc) == 0:
        empty = np.zeros((0, 3))
        return AnchorSet(empty, empty.copy(), np.zeros(0, dtype=np.int64))
    strips, inv = np.unique(slc.strips, return_inverse=True)
    inv = inv.reshape(-1)
    y = slc.points[:, 1]
    lo = np.full(len(strips), np.inf)
    hi = np.full(len(strips), -np.inf)
    np.minimum.at(lo, inv, y)
    np.maximum.at(hi, inv, y)
    x = strip_x(strips, params.sigma2)
    z0 = slc.index * params.sigma1
    origins = np.stack([x, lo, np.full(len(x), z0 + params.eps1)], axis=1)
    terms = np.stack([x, hi, np.full(len(x), z0 + params.eps2)], axis=1)
    return AnchorSet(origins, terms, strips)


def descriptor_value(a, b, params: SliceParams = SliceParams(),
                     a_is_termination: bool = False, b_is_termination: bool = False) -> float:
    """Pairwise filtration value between two points of one slice (slice points
    or anchors). ``f(v, v)`` is the value at which vertex ``v`` appears."""
    if a_is_termination and b_is_termination:
        return 0.0
    if a[0] != b[0] or abs(abs(a[2] - b[2]) - params.eps2) <= params.eps2 / 10:
        return math.inf
    return float(a[0] + abs(a[1] - b[1]))


class _ElderForest:
    """Disjoint sets where the root remembers the oldest birth in its set."""

    def __init__(self, births):
        self.parent = list(range(len(births)))
        self.births = list(births)
        self.birth_vertex = list(range(len(births)))

    def find(self, v):
        parent = self.parent
        root = v
        while parent[root] != root:
            root = parent[root]
        while parent[v] != root:
            parent[v], v = root, parent[v]
        return root

    def merge(self, u, v):
        """Union the sets of u and v; return (dying birth, dying birth vertex) or None."""
        ru, rv = self.find(u), self.find(v)
        if ru == rv:
            return None
        bu, bv = self.births[ru], self.births[rv]
        iu, iv = self.birth_vertex[ru], self.birth_vertex[rv]
        if (bv, iv) < (bu, iu):
            ru, rv = rv, ru
            bu, bv, iu, iv = bv, bu, iv, iu
        self.parent[rv] = ru
        return bv, iv


def persistence_pairs(births, edges, is_termination=None):
    """0-dimensional sublevel persistence from vertex births and weighted edges.

    ``edges`` is an iterable of ``(weight, u, v)``. Edges are processed in
    ascending weight (stable), the younger component dies at the merge value.
    Components whose oldest vertex is flagged in ``is_termination`` produce no
    bars, and the essential bar is never reported.
    """
    forest = _ElderForest(births)
    edges = sorted(edges, key=lambda e: e[0])
    out = []
    for w, u, v in edges:
        if not math.isfinite(w):
            continue
        died = forest.merge(u, v)
        if died is None:
            continue
        birth, vertex = died
        if is_termination is not None and is_termination[vertex]:
            continue
        out.append((birth, max(w, birth)))
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def strip_edges(slc: Slice, anchors: AnchorSet, params: SliceParams = SliceParams()):
    """Finite edges that suffice for 0-dimensional persistence of one slice.

    Vertex layout: slice points, then origins, then terminations. Within a
    strip all finite edges share x, so ``f`` grows with |dy| and the sorted-y
    chain plus the anchor links span the same merge tree as the complete
    graph.
    """
    m = len(slc)
    s = len(anchors.strips)
    pts = slc.points
    births = np.concatenate([pts[:, 0], anchors.origins[:, 0], np.zeros(s)])
    edges = []
    order = np.lexsort((pts[:, 1], slc.strips))
    sorted_strips = slc.strips[order]
    starts = np.searchsorted(sorted_strips, anchors.strips, side="left")
    ends = np.searchsorted(sorted_strips, anchors.strips, side="right")
    for k in range(s):
        idx = order[starts[k]:ends[k]]
        x = anchors.origins[k, 0]
        ys = pts[idx, 1]
        o = m + k
        t = m + s + k
        edges.append((x + abs(anchors.origins[k, 1] - ys[0]), o, int(idx[0])))
        dy = np.abs(np.diff(ys))
        edges.extend(zip((x + dy).tolist(), idx[:-1].tolist(), idx[1:].tolist()))
        edges.append((x + abs(anchors.origins[k, 1] - anchors.terminations[k, 1]), o, t))
        if k:
            edges.append((0.0, t - 1, t))
    is_term = np.zeros(m + 2 * s, dtype=bool)
    is_term[m + s:] = True
    return births, edges, is_term


def filter_pd(pd) -> np.ndarray:
    """Keep, for every distinct birth, only the point with the largest persistence."""
    pd = np.asarray(pd, dtype=np.float64).reshape(-1, 2)
    if len(pd) == 0:
        return pd
    order = np.lexsort((pd[:, 1], pd[:, 0]))
    pd = pd[order]
    keep = {}
    for b, d in pd:
        cur = keep.get(b)
        if cur is None or d - b > cur - b:
            keep[b] = d
    return np.array(sorted(keep.items()), dtype=np.float64).reshape(-1, 2)


def zero_dim_pd(slc: Slice, anchors: AnchorSet | None = None,
                params: SliceParams = SliceParams()) -> np.ndarray:
    """Filtered 0-dimensional persistence diagram of one slice, rows (birth, death)."""
    if len(slc) == 0:
        return np.zeros((0, 2))
    if anchors is None:
        anchors = compute_anchors(slc, params)
    births, edges, is_term = strip_edges(slc, anchors, params)
    return filter_pd(persistence_pairs(births, edges, is_term))


def write_pd_csv(path, diagrams):
    """Write ``{slice_index: pd}`` (or a list of diagrams) as slice_index,birth,death rows."""
    items = diagrams.items() if isinstance(diagrams, dict) else enumerate(diagrams)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slice_index", "birth", "death"])
        for i, pd in items:
            for b, d in np.asarray(pd).reshape(-1, 2):
                w.writerow([i, repr(float(b)), repr(float(d))])


def read_pd_csv(path):
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(int(row["slice_index"]), []).append((float(row["birth"]), float(row["death"])))
    return {k: np.array(v) for k, v in out.items()}
