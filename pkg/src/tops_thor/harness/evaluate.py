"""Dataset evaluation with frame-level folds, reports and the slicing-resolution sweep."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..descriptor import HIGH_END, tilt_for_slicing, tops_from_aligned
from ..library import MlpConfig, build_training_descriptors, train_library
from ..pointcloud import DegenerateSegmentError, PointCloud, ViewNormalization, normalize_view, preprocess
from ..recognition import classify_normalized, recognize_frame, trailing_slice_mask
from .config import RunConfig, slice_variant
from .dataset import DataError, ManifestEntry

log = logging.getLogger(__name__)

N_FOLDS = 5
UNRECOGNIZED = "<none>"


def fold_of(frame_id: str, seed: int, folds: int = N_FOLDS) -> int:
    digest = hashlib.sha256(f"{seed}:{frame_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % folds


@dataclass
class EvalReport:
    class_names: list
    confusion: np.ndarray  # rows: truth, columns: class_names + [UNRECOGNIZED]
    fold_accuracy: list  # nan for empty folds
    conditions: dict  # "key=value" -> (mean, std, count)
    records: list = field(default_factory=list)
    seed: int = 0

    @property
    def total(self):
        return int(self.confusion.sum())

    @property
    def accuracy(self):
        return float(np.trace(self.confusion[:, :len(self.class_names)]) / max(self.total, 1))

    @property
    def per_class(self):
        rows = self.confusion.sum(axis=1)
        diag = np.diag(self.confusion[:, :len(self.class_names)])
        return {c: (float(diag[i] / rows[i]) if rows[i] else math.nan) for i, c in enumerate(self.class_names)}

    @property
    def fold_mean(self):
        return float(np.nanmean(self.fold_accuracy))

    @property
    def fold_std(self):
        return float(np.nanstd(self.fold_accuracy))

    def summary_row(self):
        return f"{100 * self.fold_mean:.2f} ± {100 * self.fold_std:.2f}"

    def write(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        header = f"# folds={N_FOLDS} (frame-level, hashed with seed {self.seed})"
        with open(d / "summary.csv", "w", newline="") as fh:
            fh.write(header + "\n")
            w = csv.writer(fh)
            w.writerow(["metric", "mean", "std", "count"])
            w.writerow(["overall", _f(self.fold_mean), _f(self.fold_std), self.total])
            for i, acc in enumerate(self.fold_accuracy):
                w.writerow([f"fold{i}", _f(acc), "", ""])
            for c, acc in self.per_class.items():
                w.writerow([f"class={c}", _f(acc), "", int(self.confusion[self.class_names.index(c)].sum())])
            for cond, (mean, std, n) in sorted(self.conditions.items()):
                w.writerow([cond, _f(mean), _f(std), n])
        with open(d / "confusion.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["truth\\predicted"] + self.class_names + [UNRECOGNIZED])
            for c, row in zip(self.class_names, self.confusion):
                w.writerow([c] + [int(v) for v in row])
        with open(d / "predictions.csv", "w", newline="") as fh:
            keys = ["frame_id", "instance", "fold", "truth", "predicted", "probability", "occluded", "tags"]
            w = csv.writer(fh)
            w.writerow(keys)
            for r in self.records:
                w.writerow([r["frame_id"], r["instance"], r["fold"], r["truth"], r["predicted"],
                            _f(r["probability"]), int(r["occluded"]),
                            ";".join(f"{k}={v}" for k, v in sorted(r["tags"].items()))])


def _f(v):
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def build_report(records, class_names, seed=0) -> EvalReport:
    if not records:
        raise DataError("nothing to evaluate")
    names = list(class_names)
    for r in records:
        if r["truth"] not in names:
            names.append(r["truth"])
    col = {c: i for i, c in enumerate(names)}
    conf = np.zeros((len(names), len(names) + 1), dtype=np.int64)
    for r in records:
        conf[col[r["truth"]], col.get(r["predicted"], len(names))] += 1

    def fold_stats(subset):
        acc = []
        for f in range(N_FOLDS):
            rs = [r for r in subset if r["fold"] == f]
            acc.append(sum(r["truth"] == r["predicted"] for r in rs) / len(rs) if rs else math.nan)
        return acc

    folds = fold_stats(records)
    conditions = {}
    keys = sorted({f"{k}={v}" for r in records for k, v in r["tags"].items()})
    for cond in keys:
        k, v = cond.split("=", 1)
        subset = [r for r in records if r["tags"].get(k) == v]
        acc = fold_stats(subset)
        conditions[cond] = (float(np.nanmean(acc)), float(np.nanstd(acc)), len(subset))
    return EvalReport(names, conf, folds, conditions, list(records), seed)


# ---------------------------------------------------------------------------
# datasets

_WORKER = {}


def _init_worker(library, config):
    _WORKER["library"] = library
    _WORKER["config"] = config


def _recognize_entry(entry: ManifestEntry):
    lib, config = _WORKER["library"], _WORKER["config"]
    frame = entry.load()
    return recognize_frame(frame, lib, config.recognition())


def _map_frames(entries, library, config: RunConfig):
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers, initializer=_init_worker, initargs=(library, config)) as ex:
            # map() yields in submission order, so results stay frame-ordered
            return list(ex.map(_recognize_entry, entries))
    _init_worker(library, config)
    return [_recognize_entry(e) for e in entries]


def evaluate(entries, library, config: RunConfig) -> EvalReport:
    """Recognize every labeled instance listed in the manifest entries."""
    if not entries:
        raise DataError("empty dataset")
    library.check(config.tops)
    results = _map_frames(entries, library, config)
    records = []
    for entry, frame_records in zip(entries, results):
        by_inst = {r["instance"]: r for r in frame_records}
        fold = fold_of(entry.frame_id, config.seed)
        for inst, truth in sorted(entry.labels.items()):
            r = by_inst.get(inst, {})
            tags = dict(entry.tags)
            tags.setdefault("occluded", "yes" if r.get("occluded") else "no")
            records.append({"frame_id": entry.frame_id, "instance": inst, "fold": fold, "truth": truth,
                            "predicted": r.get("label") or UNRECOGNIZED, "probability": r.get("probability"),
                            "occluded": bool(r.get("occluded")), "tags": tags})
    return build_report(records, library.class_names, config.seed)


def write_overlays(entries, report: EvalReport, directory):
    """Grayscale depth with a green (correct) or red (wrong) box per instance."""
    from PIL import Image, ImageDraw

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    by_frame = {}
    for r in report.records:
        by_frame.setdefault(r["frame_id"], []).append(r)
    for entry in entries:
        frame = entry.load()
        depth = frame.depth.astype(np.float64)
        valid = depth > 0
        img = np.zeros(depth.shape, dtype=np.uint8)
        if valid.any():
            lo, hi = depth[valid].min(), depth[valid].max()
            img[valid] = (255 - 200 * (depth[valid] - lo) / max(hi - lo, 1)).astype(np.uint8)
        im = Image.fromarray(img).convert("RGB")
        draw = ImageDraw.Draw(im)
        for r in by_frame.get(entry.frame_id, []):
            rows, cols = np.nonzero(frame.mask == r["instance"])
            if len(rows) == 0:
                continue
            color = (0, 200, 0) if r["truth"] == r["predicted"] else (220, 0, 0)
            draw.rectangle([cols.min(), rows.min(), cols.max(), rows.max()], outline=color)
        im.save(d / f"{entry.frame_id}_overlay.png")


# ---------------------------------------------------------------------------
# synthetic held-out views

def recognize_view(cloud, library, config: RunConfig, drop_fraction: float = 0.0):
    """Recognize a rendered camera-frame view; ``drop_fraction`` > 0 simulates
    occlusion by deleting that share of the trailing slices."""
    rcfg = config.recognition()
    norm = normalize_view(preprocess(cloud, config.preprocess))
    cam = np.zeros(3)
    if drop_fraction > 0:
        # delete the slices on the tilted cloud itself so the kept slices are untouched
        keep = trailing_slice_mask(norm, config.tops, drop_fraction)
        aligned = tilt_for_slicing(norm.cloud, config.tops.alpha)
        desc = tops_from_aligned(PointCloud(aligned.points[keep]), config.tops)
        part = ViewNormalization(PointCloud(norm.cloud.points[keep]), norm.rotation, norm.translation,
                                 norm.box, norm.degenerate)
        return classify_normalized(part, library, rcfg, True, HIGH_END, cam, desc)
    return classify_normalized(norm, library, rcfg, False, None, cam)


def evaluate_views(test_views, library, config: RunConfig, drop_fraction: float = 0.0) -> EvalReport:
    """``test_views`` maps class label -> rendered views (pose + cloud)."""
    library.check(config.tops)
    records = []
    for label in sorted(test_views):
        for v in test_views[label]:
            fid = f"{label}_t{v.pose.theta:.4f}_p{v.pose.phi:.4f}"
            try:
                res = recognize_view(v.cloud, library, config, drop_fraction)
                pred, prob, occ = res.label, res.probability, res.occluded
            except DegenerateSegmentError:
                pred, prob, occ = UNRECOGNIZED, None, drop_fraction > 0
            records.append({"frame_id": fid, "instance": 1, "fold": fold_of(fid, config.seed), "truth": label,
                            "predicted": pred, "probability": prob, "occluded": occ,
                            "tags": {"occlusion": "synthetic" if drop_fraction > 0 else "none"}})
    return build_report(records, library.class_names, config.seed)


# ---------------------------------------------------------------------------
# sweep

SWEEP_ALPHAS = (0.0, math.pi / 4, math.pi / 2)
SWEEP_RESOLUTIONS = ((0.05, 1.25e-2), (0.1, 2.5e-2), (0.2, 5e-2))
_PROBE_SLICES = 64


@dataclass
class SweepCell:
    alpha: float
    sigma1: float
    sigma2: float
    max_slices: int
    fingerprint: str
    report: EvalReport


def train_for(config: RunConfig, train_sets, class_face_areas, mlp: MlpConfig | None = None):
    """Descriptor tables and library for one configuration. N_s is taken from
    the training vocabulary (largest observed slice count)."""
    probe = replace(config.tops, max_slices=_PROBE_SLICES)
    tables = build_training_descriptors(train_sets, probe, config.preprocess, class_face_areas)
    tables = tables.with_max_slices(tables.observed_max_slices)
    cfg = replace(config, tops=tables.params)
    return cfg, train_library(tables, config=mlp or config.mlp, seed=config.seed)


def sweep(config: RunConfig, train_sets, test_views, class_face_areas, alphas=SWEEP_ALPHAS,
          resolutions=SWEEP_RESOLUTIONS, progress=None) -> list[SweepCell]:
    cells = []
    for alpha in alphas:
        for s1, s2 in resolutions:
            cfg, lib = train_for(slice_variant(config, alpha, s1, s2), train_sets, class_face_areas)
            report = evaluate_views(test_views, lib, cfg)
            cells.append(SweepCell(alpha, s1, s2, cfg.tops.max_slices, cfg.tops.fingerprint(), report))
            if progress:
                progress(cells[-1])
    return cells


def write_sweep(cells, path):
    """Rows are alpha values, columns the (sigma1, sigma2) pairs; cells mean ± std (%)."""
    alphas = sorted({c.alpha for c in cells})
    res = sorted({(c.sigma1, c.sigma2) for c in cells})
    table = {(c.alpha, c.sigma1, c.sigma2): c for c in cells}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha"] + [f"sigma1={a:g} sigma2={b:g}" for a, b in res])
        for al in alphas:
            w.writerow([f"{al:.6f}"] + [table[(al, a, b)].report.summary_row() if (al, a, b) in table else ""
                                        for a, b in res])
