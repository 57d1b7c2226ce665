"""Procedural test meshes, centred at the origin."""

from __future__ import annotations

import numpy as np

from .views import TriangleMesh


def box_mesh(extents, subdivisions: int = 1) -> TriangleMesh:
    """Axis-aligned box with each face split into ``subdivisions``**2 quads."""
    ex = np.asarray(extents, dtype=np.float64) / 2
    n = subdivisions
    verts, faces = [], []
    g = np.linspace(-1.0, 1.0, n + 1)
    for axis in range(3):
        u_ax, v_ax = [a for a in range(3) if a != axis]
        for sign in (-1.0, 1.0):
            base = len(verts)
            for a in g:
                for b in g:
                    p = np.zeros(3)
                    p[axis] = sign
                    p[u_ax], p[v_ax] = a, b
                    verts.append(p * ex)
            for i in range(n):
                for j in range(n):
                    q00 = base + i * (n + 1) + j
                    q01, q10, q11 = q00 + 1, q00 + n + 1, q00 + n + 2
                    faces += [(q00, q10, q11), (q00, q11, q01)]
    return TriangleMesh(np.array(verts), np.array(faces))


def cylinder_mesh(radius: float, height: float, segments: int = 48, rings: int = 8) -> TriangleMesh:
    """Closed cylinder with its axis along x."""
    ang = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    xs = np.linspace(-height / 2, height / 2, rings + 1)
    verts = [(x, radius * np.cos(a), radius * np.sin(a)) for x in xs for a in ang]
    faces = []
    for r in range(rings):
        for s in range(segments):
            a = r * segments + s
            b = r * segments + (s + 1) % segments
            faces += [(a, b, b + segments), (a, b + segments, a + segments)]
    for x, ring in ((xs[0], 0), (xs[-1], rings)):
        c = len(verts)
        verts.append((x, 0.0, 0.0))
        for s in range(segments):
            faces.append((c, ring * segments + s, ring * segments + (s + 1) % segments))
    return TriangleMesh(np.array(verts), np.array(faces))


def ellipsoid_mesh(semi_axes, n_lat: int = 24, n_lon: int = 48) -> TriangleMesh:
    a = np.asarray(semi_axes, dtype=np.float64)
    verts = [(0.0, 0.0, 1.0)]
    for i in range(1, n_lat):
        t = np.pi * i / n_lat
        for j in range(n_lon):
            p = 2 * np.pi * j / n_lon
            verts.append((np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)))
    verts.append((0.0, 0.0, -1.0))
    faces = []
    for j in range(n_lon):
        faces.append((0, 1 + j, 1 + (j + 1) % n_lon))
    for i in range(n_lat - 2):
        for j in range(n_lon):
            a0 = 1 + i * n_lon + j
            a1 = 1 + i * n_lon + (j + 1) % n_lon
            faces += [(a0, a0 + n_lon, a1 + n_lon), (a0, a1 + n_lon, a1)]
    last = len(verts) - 1
    base = 1 + (n_lat - 2) * n_lon
    for j in range(n_lon):
        faces.append((last, base + (j + 1) % n_lon, base + j))
    return TriangleMesh(np.array(verts) * a, np.array(faces))


def icosphere(radius: float = 1.0, subdivisions: int = 3) -> TriangleMesh:
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return TriangleMesh(np.array(verts) * radius, np.array(f))


def primitive_set():
    """The three reference shapes used by the synthetic end-to-end study (meters)."""
    return {
        "box": box_mesh((0.20, 0.10, 0.05), subdivisions=2),
        "cylinder": cylinder_mesh(0.035, 0.15),
        "ellipsoid": ellipsoid_mesh((0.12, 0.04, 0.04)),
    }
