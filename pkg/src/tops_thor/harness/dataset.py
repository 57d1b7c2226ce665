"""Frame loading and the tab-separated dataset manifest.

Manifest columns (header line required, ``#`` lines ignored)::

    frame_id  depth  mask  intrinsics  labels  tags

``labels`` is ``instance:class`` pairs separated by commas (``1:box,3:cylinder``),
``tags`` is optional ``key=value`` pairs separated by semicolons
(``occlusion=heavy;lighting=dark``). Paths are relative to the manifest.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..recognition import SceneFrame
from ..views import CameraModel, read_depth_png, write_depth_png

COLUMNS = ("frame_id", "depth", "mask", "intrinsics", "labels", "tags")


class DataError(Exception):
    pass


def _read_image(path):
    try:
        with Image.open(path) as im:
            return np.array(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def load_frame(depth_path, mask_path, intrinsics_path) -> SceneFrame:
    """Depth scale comes from the depth sidecar, then the intrinsics file, then 1 mm."""
    try:
        intr = json.loads(Path(intrinsics_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read intrinsics {intrinsics_path}: {exc}") from exc
    try:
        depth, scale = read_depth_png(depth_path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read depth {depth_path}: {exc}") from exc
    mask = _read_image(mask_path)
    if mask.ndim != 2:
        raise DataError(f"{mask_path}: mask must be single channel")
    if depth.shape != mask.shape:
        raise DataError(f"depth {depth.shape} and mask {mask.shape} dimensions differ")
    scale = float(scale or intr.get("depth_scale", 0.001))
    h, w = depth.shape
    try:
        cam = CameraModel(float(intr["fx"]), float(intr["fy"]), float(intr["cx"]), float(intr["cy"]),
                          int(intr.get("width", w)), int(intr.get("height", h)), scale)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{intrinsics_path}: bad intrinsics ({exc})") from exc
    return SceneFrame(depth.astype(np.uint16), mask.astype(np.int64), cam)


def save_frame(directory, frame_id, frame: SceneFrame):
    """Write depth/mask/intrinsics files; returns their paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    depth_p, mask_p, intr_p = d / f"{frame_id}_depth.png", d / f"{frame_id}_mask.png", d / f"{frame_id}_cam.json"
    write_depth_png(depth_p, frame.depth, frame.camera.depth_scale)
    if frame.mask.max() > 255:
        raise DataError("mask labels above 255 are not supported by the 8-bit writer")
    Image.fromarray(frame.mask.astype(np.uint8)).save(mask_p)
    frame.camera.to_json(intr_p)
    return depth_p, mask_p, intr_p


@dataclass(frozen=True)
class ManifestEntry:
    frame_id: str
    depth: Path
    mask: Path
    intrinsics: Path
    labels: dict  # instance id -> class name
    tags: dict = field(default_factory=dict)

    def load(self) -> SceneFrame:
        return load_frame(self.depth, self.mask, self.intrinsics)


def parse_labels(text):
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        inst, _, name = item.partition(":")
        if not name:
            raise DataError(f"bad label entry {item!r}")
        try:
            out[int(inst)] = name.strip()
        except ValueError as exc:
            raise DataError(f"bad instance id in {item!r}") from exc
    return out


def parse_tags(text):
    out = {}
    for item in filter(None, (s.strip() for s in (text or "").split(";"))):
        key, _, value = item.partition("=")
        out[key.strip()] = value.strip()
    return out


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    try:
        lines = [ln for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not lines:
        raise DataError(f"{path}: empty manifest")
    rows = list(csv.reader(lines, delimiter="\t"))
    header = [h.strip() for h in rows[0]]
    if tuple(header[:5]) != COLUMNS[:5]:
        raise DataError(f"{path}: header must start with {'/'.join(COLUMNS[:5])}")
    base = path.parent
    entries = []
    for n, row in enumerate(rows[1:], start=2):
        if len(row) < 5:
            raise DataError(f"{path}:{n}: expected at least 5 columns")
        entries.append(ManifestEntry(row[0], base / row[1], base / row[2], base / row[3],
                                     parse_labels(row[4]), parse_tags(row[5] if len(row) > 5 else "")))
    if not entries:
        raise DataError(f"{path}: manifest lists no frames")
    return entries


def write_manifest(path, entries):
    base = Path(path).parent
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(COLUMNS)
        for e in entries:
            labels = ",".join(f"{k}:{v}" for k, v in sorted(e.labels.items()))
            tags = ";".join(f"{k}={v}" for k, v in sorted(e.tags.items()))
            w.writerow([e.frame_id] + [_rel(p, base) for p in (e.depth, e.mask, e.intrinsics)] + [labels, tags])


def _rel(p, base):
    p = Path(p).resolve()
    try:
        return p.relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(p)
