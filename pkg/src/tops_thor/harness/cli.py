"""Command-line front end: render, train, recognize, evaluate, sweep."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import meshio
from ..descriptor import read_descriptor_csv, write_descriptor_csv
from ..library import (FingerprintMismatchError, LibraryError, LibraryFormatError, build_training_descriptors,
                       load_library, save_library, tables_from_arrays, train_library)
from ..pointcloud import DegenerateSegmentError
from ..primitives import primitive_set
from ..recognition import SceneFrame, recognize_frame
from ..views import GROUPS, TriangleMesh
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .dataset import DataError, ManifestEntry, load_frame, read_manifest, save_frame, write_manifest
from .evaluate import evaluate, sweep, write_overlays, write_sweep
from .synthetic import canonical_areas, group_views, render_views, split_views

log = logging.getLogger("tops_thor")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_FINGERPRINT = 0, 2, 3, 4


def _meshes(args, config):
    """Named meshes from --mesh files, a mesh directory, or the built-in primitives."""
    paths = list(args.mesh or [])
    if config.meshes:
        d = Path(config.meshes)
        if not d.is_dir():
            raise DataError(f"mesh directory {d} not found")
        paths += sorted(p for p in d.iterdir() if p.suffix.lower() in (".ply", ".obj", ".stl"))
    if not paths:
        return primitive_set()
    out = {}
    for p in paths:
        try:
            out[Path(p).stem] = TriangleMesh.load(p)
        except (OSError, meshio.MeshFormatError) as exc:
            raise DataError(f"cannot load mesh {p}: {exc}") from exc
    if config.classes:
        out = {k: v for k, v in out.items() if k in config.classes}
    return out


def _render_all(meshes, config: RunConfig, holdout: bool):
    train, test, areas = {}, {}, {}
    rc = config.render
    for name, mesh in sorted(meshes.items()):
        mesh, views = render_views(mesh, config.camera, rc.step, rc.radius, rc.dedupe_poles, rc.min_points)
        if not views:
            raise DataError(f"mesh {name} produced no visible views")
        tr, te = split_views(views, rc.step) if holdout else (views, [])
        train[name] = group_views(mesh, tr, rc.tie_deg)
        test[name] = te
        areas[name] = canonical_areas(mesh, config.preprocess)
        log.info("%s: %d views (%d held out)", name, len(views), len(te))
    return train, test, areas


def cmd_render(args, config: RunConfig):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test, areas = _render_all(_meshes(args, config), config, args.holdout)
    tables = build_training_descriptors(train, config.tops, config.preprocess, areas)
    for g in GROUPS:
        t = tables.groups.get(g)
        if t is None:
            continue
        rows = [(tables.class_names[y], n, t.X[i].toarray().ravel()) for i, (y, n) in enumerate(zip(t.y, t.n_s))]
        write_descriptor_csv(out / f"{g}.csv", rows)
    (out / "classes.json").write_text(json.dumps(
        {"classes": tables.class_names, "face_areas": {k: list(v) for k, v in areas.items()},
         "fingerprint": config.tops.fingerprint()}, indent=2))
    if args.holdout:
        entries = []
        frames = out / "heldout"
        for label, views in sorted(test.items()):
            for v in views:
                fid = f"{label}_t{v.pose.theta:.4f}_p{v.pose.phi:.4f}"
                frame = SceneFrame(v.depth, (v.depth > 0).astype(np.int64), config.camera)
                d, m, c = save_frame(frames, fid, frame)
                entries.append(ManifestEntry(fid, d, m, c, {1: label}, {}))
        write_manifest(out / "heldout.tsv", entries)
    print(f"wrote descriptors for {len(tables.class_names)} classes to {out}")
    return EXIT_OK


def cmd_train(args, config: RunConfig):
    src = Path(args.descriptors)
    try:
        meta = json.loads((src / "classes.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {src / 'classes.json'}: {exc}") from exc
    if meta.get("fingerprint") != config.tops.fingerprint():
        raise FingerprintMismatchError("descriptors were computed with different descriptor parameters")
    names = meta["classes"]
    per_group = {}
    for g in GROUPS:
        path = src / f"{g}.csv"
        if not path.exists():
            raise DataError(f"missing {path}")
        labels, ns, X = read_descriptor_csv(path)
        if X.shape[1] != config.tops.length:
            raise DataError(f"{path}: descriptor length {X.shape[1]} != {config.tops.length}")
        per_group[g] = (X, [names.index(lb) for lb in labels], ns)
    tables = tables_from_arrays(per_group, names, config.tops, meta.get("face_areas"))
    lib = train_library(tables, config=config.mlp, seed=config.seed,
                        progress=lambda g, k: log.info("trained %s/k=%d", g, k))
    save_library(lib, args.out)
    print(f"saved library with {len(lib.sets) * lib.max_slices} models to {args.out}")
    return EXIT_OK


def _library(args, config):
    path = args.library or config.library
    if not path:
        raise ConfigError("no library given")
    return load_library(path, config.tops)


def cmd_recognize(args, config: RunConfig):
    lib = _library(args, config)
    if args.manifest:
        frames = [(e.frame_id, e.load()) for e in read_manifest(args.manifest)]
    else:
        if not (args.depth and args.mask and args.intrinsics):
            raise ConfigError("recognize needs --manifest or --depth/--mask/--intrinsics")
        frames = [(Path(args.depth).stem, load_frame(args.depth, args.mask, args.intrinsics))]
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for fid, frame in frames:
            for rec in recognize_frame(frame, lib, config.recognition()):
                out.write(json.dumps({"frame_id": fid, **rec}) + "\n")
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_evaluate(args, config: RunConfig):
    manifest = args.manifest or config.manifest
    if not manifest:
        raise ConfigError("no manifest given")
    entries = read_manifest(manifest)
    lib = _library(args, config)
    report = evaluate(entries, lib, config)
    out = Path(args.out or config.output or "report")
    report.write(out)
    if args.overlays:
        write_overlays(entries, report, out / "overlays")
    print(f"accuracy {report.summary_row()} % over {report.total} instances (5 frame-level folds)")
    return EXIT_OK


def cmd_sweep(args, config: RunConfig):
    train, test, areas = _render_all(_meshes(args, config), config, holdout=True)
    cells = sweep(config, train, test, areas,
                  progress=lambda c: log.info("alpha=%.4f sigma1=%g: %s", c.alpha, c.sigma1, c.report.summary_row()))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_sweep(cells, out)
    print(out.read_text(), end="")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="tops-thor", description="Topological point-cloud descriptors and "
                                "occlusion-aware object recognition.")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. tops.slice.sigma1=0.2 (repeatable)")
    p.add_argument("--no-heuristics", action="store_true", help="query all three model sets")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render", help="render meshes and write per-group descriptor tables")
    r.add_argument("--mesh", action="append", help="mesh file (repeatable); default: built-in primitives")
    r.add_argument("--out", required=True)
    r.add_argument("--holdout", action="store_true",
                   help="keep odd azimuth steps out of training and write them as a test manifest")
    r.set_defaults(func=cmd_render)

    t = sub.add_parser("train", help="train the classifier library from descriptor tables")
    t.add_argument("--descriptors", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("recognize", help="recognize instances in frames (JSON lines)")
    c.add_argument("--library")
    c.add_argument("--manifest")
    c.add_argument("--depth")
    c.add_argument("--mask")
    c.add_argument("--intrinsics")
    c.add_argument("--out")
    c.set_defaults(func=cmd_recognize)

    e = sub.add_parser("evaluate", help="evaluate a library on a manifest")
    e.add_argument("--library")
    e.add_argument("--manifest")
    e.add_argument("--out")
    e.add_argument("--overlays", action="store_true", help="also write annotated PNG overlays")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="slicing-resolution study over alpha and (sigma1, sigma2)")
    s.add_argument("--mesh", action="append")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config) if args.config else RunConfig()
        config = apply_overrides(config, args.set)
        if args.no_heuristics:
            config = replace(config, use_heuristics=False)
        if args.seed is not None:
            config = replace(config, seed=args.seed)
        return args.func(args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FingerprintMismatchError as exc:
        print(f"fingerprint error: {exc}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except (DataError, LibraryFormatError, LibraryError, DegenerateSegmentError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
