"""Readers and writers for the polygon/point file formats used by the loaders.

Supported: PLY (ascii, binary little/big endian), Wavefront OBJ, STL (ascii
and binary) and plain XYZ text. Only geometry is read; colours and other
vertex properties are skipped.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class MeshFormatError(ValueError):
    pass


def _parse_ply_header(fh):
    first = fh.readline().strip()
    if first != b"ply":
        raise MeshFormatError("not a PLY file")
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype | ("list", count_t, item_t))])
    while True:
        line = fh.readline()
        if not line:
            raise MeshFormatError("truncated PLY header")
        tok = line.decode("ascii", errors="replace").split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise MeshFormatError("property before element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], ("list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
            else:
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        elif tok[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise MeshFormatError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def read_ply(path):
    """Return ``(vertices, faces, normals)``; faces/normals may be None.

    Polygons with more than three corners are fan-triangulated.
    """
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh)
        body = fh.read()

    vertices = normals = None
    faces = None
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = {}
                for pname, ptype in props:
                    if isinstance(ptype, tuple):
                        n = int(tokens[pos]); pos += 1
                        row[pname] = [int(t) for t in tokens[pos:pos + n]]
                        pos += n
                    else:
                        row[pname] = float(tokens[pos]); pos += 1
                rows.append(row)
            if name == "vertex":
                vertices, normals = _vertex_rows(rows)
            elif name == "face":
                faces = _triangulate([r.get("vertex_indices", r.get("vertex_index", [])) for r in rows])
        if pos > len(tokens):
            raise MeshFormatError("truncated PLY body")
    else:
        endian = "<" if fmt == "binary_little_endian" else ">"
        offset = 0
        for name, count, props in elements:
            if all(not isinstance(p[1], tuple) for p in props):
                dt = np.dtype([(p[0], endian + p[1]) for p in props])
                need = dt.itemsize * count
                if offset + need > len(body):
                    raise MeshFormatError("truncated PLY body")
                arr = np.frombuffer(body, dtype=dt, count=count, offset=offset)
                offset += need
                if name == "vertex":
                    vertices = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
                    if all(k in arr.dtype.names for k in ("nx", "ny", "nz")):
                        normals = np.stack([arr["nx"], arr["ny"], arr["nz"]], axis=1).astype(np.float64)
                continue
            polys = []
            for _ in range(count):
                for pname, ptype in props:
                    if isinstance(ptype, tuple):
                        _, ct, it = ptype
                        csz = np.dtype(ct).itemsize
                        if offset + csz > len(body):
                            raise MeshFormatError("truncated PLY body")
                        n = int(np.frombuffer(body, dtype=endian + ct, count=1, offset=offset)[0])
                        offset += csz
                        isz = np.dtype(it).itemsize
                        if offset + n * isz > len(body):
                            raise MeshFormatError("truncated PLY body")
                        vals = np.frombuffer(body, dtype=endian + it, count=n, offset=offset)
                        offset += n * isz
                        if pname in ("vertex_indices", "vertex_index"):
                            polys.append(vals.astype(np.int64).tolist())
                    else:
                        offset += np.dtype(ptype).itemsize
            if name == "face":
                faces = _triangulate(polys)
    if vertices is None:
        raise MeshFormatError("PLY file has no vertex element")
    return vertices, faces, normals


def _vertex_rows(rows):
    v = np.array([[r["x"], r["y"], r["z"]] for r in rows], dtype=np.float64).reshape(-1, 3)
    n = None
    if rows and all(k in rows[0] for k in ("nx", "ny", "nz")):
        n = np.array([[r["nx"], r["ny"], r["nz"]] for r in rows], dtype=np.float64)
    return v, n


def _triangulate(polys):
    tris = []
    for p in polys:
        for k in range(1, len(p) - 1):
            tris.append((p[0], p[k], p[k + 1]))
    return np.array(tris, dtype=np.int64).reshape(-1, 3)


def write_ply(path, vertices, faces=None, normals=None, binary=True):
    vertices = np.asarray(vertices, dtype=np.float64)
    header = ["ply", "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {len(vertices)}",
              "property double x", "property double y", "property double z"]
    if normals is not None:
        header += ["property double nx", "property double ny", "property double nz"]
    if faces is not None:
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    cols = vertices if normals is None else np.hstack([vertices, np.asarray(normals, dtype=np.float64)])
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(cols.astype("<f8").tobytes())
            if faces is not None:
                for f in np.asarray(faces, dtype=np.int64):
                    fh.write(struct.pack("<B3i", 3, *f))
        else:
            for row in cols:
                fh.write((" ".join(repr(float(x)) for x in row) + "\n").encode("ascii"))
            if faces is not None:
                for f in np.asarray(faces, dtype=np.int64):
                    fh.write(f"3 {f[0]} {f[1]} {f[2]}\n".encode("ascii"))


def read_obj(path):
    verts, polys = [], []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for line in fh:
            if line.startswith("v "):
                verts.append([float(t) for t in line.split()[1:4]])
            elif line.startswith("f "):
                idx = []
                for tok in line.split()[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                polys.append(idx)
    return np.array(verts, dtype=np.float64).reshape(-1, 3), _triangulate(polys)


def read_stl(path):
    raw = Path(path).read_bytes()
    if len(raw) >= 84:
        (n,) = struct.unpack_from("<I", raw, 80)
        if 84 + 50 * n == len(raw):
            dt = np.dtype([("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
            arr = np.frombuffer(raw, dtype=dt, count=n, offset=84)
            tri = arr["v"].astype(np.float64).reshape(-1, 3)
            return _weld(tri)
    pts = []
    for line in raw.decode("ascii", errors="replace").splitlines():
        tok = line.split()
        if tok and tok[0] == "vertex":
            pts.append([float(t) for t in tok[1:4]])
    if not pts or len(pts) % 3:
        raise MeshFormatError("malformed STL")
    return _weld(np.array(pts, dtype=np.float64))


def _weld(corners):
    uniq, inv = np.unique(corners, axis=0, return_inverse=True)
    return uniq, inv.reshape(-1, 3).astype(np.int64)


def load_mesh(path):
    """Load a triangle mesh as ``(vertices, faces)`` based on the file suffix."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        v, f, _ = read_ply(path)
        if f is None or len(f) == 0:
            raise MeshFormatError(f"{path}: PLY file has no faces")
        return v, f
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".stl":
        return read_stl(path)
    raise MeshFormatError(f"unsupported mesh format: {suffix}")


def read_xyz(path):
    data = np.loadtxt(path, dtype=np.float64, ndmin=2, comments="#")
    if data.size == 0:
        return np.zeros((0, 3))
    return data[:, :3]


def write_xyz(path, points):
    np.savetxt(path, np.asarray(points, dtype=np.float64).reshape(-1, 3), fmt="%.17g")
