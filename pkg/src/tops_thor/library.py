"""Library of per-view-group, per-slice-count classifiers.

For each view group (front/side/top) there is one model per slice count
k = 1..N_s; model k is trained on descriptors whose slice blocks >= k are
zeroed. The reference classifier is a small fully connected network trained
with Adam on categorical cross-entropy.
"""

from __future__ import annotations

import io
import json
import logging
import os
import struct
import tempfile
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np
import scipy.sparse as sp

from .descriptor import TopsParams, compute_tops
from .pointcloud import (DegenerateSegmentError, PreprocessParams, mirror_augment, min_volume_obb,
                         preprocess, view_normalize)
from .views import GROUPS, ViewSets

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
_MAGIC = b"TOPSMDL1"
_KIND_MLP, _KIND_CONST = 0, 1


class LibraryError(Exception):
    pass


class LibraryFormatError(LibraryError):
    pass


class FingerprintMismatchError(LibraryError):
    pass


class Classifier(Protocol):
    classes_: np.ndarray

    def fit(self, X, y): ...

    def predict_proba(self, X) -> np.ndarray: ...


@dataclass(frozen=True)
class MlpConfig:
    hidden: tuple[int, ...] = (512, 256, 128, 64)
    epochs: int = 100
    # (learning rate, number of epochs) phases, applied in order
    lr_phases: tuple[tuple[float, int], ...] = ((1e-2, 50), (1e-3, 50))
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    min_feature_std: float = 1e-8

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if sum(n for _, n in self.lr_phases) < self.epochs:
            raise ValueError("learning-rate phases must cover every epoch")

    def lr_at(self, epoch):
        for lr, n in self.lr_phases:
            if epoch < n:
                return lr
            epoch -= n
        return self.lr_phases[-1][0]

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        if "lr_phases" in d:
            d["lr_phases"] = tuple(tuple(p) for p in d["lr_phases"])
        return cls(**d)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _column_stats(X):
    if sp.issparse(X):
        mean = np.asarray(X.mean(axis=0)).ravel()
        sq = np.asarray(X.multiply(X).mean(axis=0)).ravel()
    else:
        mean = X.mean(axis=0)
        sq = (X * X).mean(axis=0)
    return mean, np.sqrt(np.maximum(sq - mean * mean, 0.0))


class MLPClassifier:
    """Fully connected ReLU network with a softmax output.

    Inputs are standardized with training statistics; features that are
    constant over the training rows are dropped.
    """

    def __init__(self, config: MlpConfig = MlpConfig(), seed: int = 0):
        self.config = config
        self.seed = seed
        self.classes_ = None
        self.input_dim = None
        self.active = None
        self.mean = None
        self.std = None
        self.weights = []
        self.biases = []

    def _prepare(self, X):
        if sp.issparse(X):
            X = X[:, self.active].toarray()
        else:
            X = np.asarray(X, dtype=np.float64).reshape(-1, self.input_dim)[:, self.active]
        return ((X.astype(np.float32) - self.mean) / self.std).astype(np.float32, copy=False)

    def fit(self, X, y, n_classes=None):
        cfg = self.config
        rng = np.random.default_rng(self.seed)
        y = np.asarray(y, dtype=np.int64)
        n_classes = int(n_classes if n_classes is not None else y.max() + 1)
        self.classes_ = np.arange(n_classes)
        self.input_dim = X.shape[1]
        mean, std = _column_stats(X)
        self.active = np.flatnonzero(std > cfg.min_feature_std).astype(np.int64)
        self.mean = mean[self.active].astype(np.float32)
        self.std = std[self.active].astype(np.float32)
        Z = self._prepare(X)

        widths = [len(self.active), *cfg.hidden, n_classes]
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(6.0 / max(fan_in, 1))
            self.weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(np.float32))
            self.biases.append(np.zeros(fan_out, dtype=np.float32))
        params = [p for pair in zip(self.weights, self.biases) for p in pair]
        m = [np.zeros_like(p) for p in params]
        v = [np.zeros_like(p) for p in params]
        onehot = np.eye(n_classes, dtype=np.float32)[y]
        n = len(Z)
        step = 0
        for epoch in range(cfg.epochs):
            lr = cfg.lr_at(epoch)
            perm = rng.permutation(n)
            for s in range(0, n, cfg.batch_size):
                idx = perm[s:s + cfg.batch_size]
                grads = self._backprop(Z[idx], onehot[idx])
                step += 1
                b1t = 1 - cfg.beta1 ** step
                b2t = 1 - cfg.beta2 ** step
                for p, g, mi, vi in zip(params, grads, m, v):
                    mi *= cfg.beta1
                    mi += (1 - cfg.beta1) * g
                    vi *= cfg.beta2
                    vi += (1 - cfg.beta2) * (g * g)
                    p -= (lr / b1t) * mi / (np.sqrt(vi / b2t) + cfg.adam_eps)
        return self

    def _forward(self, Z):
        acts = [Z]
        h = Z
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts

    def _backprop(self, Z, T):
        acts = self._forward(Z)
        delta = (_softmax(acts[-1]) - T) / len(Z)
        grads = []
        for i in range(len(self.weights) - 1, -1, -1):
            grads.append(delta.sum(axis=0))
            grads.append(acts[i].T @ delta)
            if i:
                delta = (delta @ self.weights[i].T) * (acts[i] > 0)
        return grads[::-1]

    def predict_proba(self, X):
        single = not sp.issparse(X) and np.ndim(X) == 1
        Z = self._prepare(X if not single else np.asarray(X)[None])
        p = _softmax(self._forward(Z)[-1].astype(np.float64))
        return p[0] if single else p

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=-1)


class ConstantClassifier:
    """Returns the training class frequencies for every input."""

    def __init__(self, probs=None):
        self.probs = None if probs is None else np.asarray(probs, dtype=np.float32)
        self.classes_ = None if probs is None else np.arange(len(self.probs))

    def fit(self, X, y, n_classes=None):
        y = np.asarray(y, dtype=np.int64)
        n_classes = int(n_classes if n_classes is not None else y.max() + 1)
        counts = np.bincount(y, minlength=n_classes).astype(np.float64)
        self.probs = (counts / counts.sum()).astype(np.float32)
        self.classes_ = np.arange(n_classes)
        return self

    def predict_proba(self, X):
        p = self.probs.astype(np.float64)
        if not sp.issparse(X) and np.ndim(X) == 1:
            return p.copy()
        return np.tile(p, (X.shape[0], 1))

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=-1)


# ---------------------------------------------------------------------------
# training data

@dataclass
class GroupTable:
    """Full-length descriptors of one view group; per-k views are derived."""

    X: sp.csr_matrix
    y: np.ndarray
    n_s: np.ndarray

    def for_k(self, k, block_size):
        X = self.X.copy()
        X.data[X.indices >= k * block_size] = 0.0
        X.eliminate_zeros()
        return X, self.y


class TrainingTables(Mapping):
    """``tables[(group, k)] -> (X, y)`` for every group and k = 1..N_s."""

    def __init__(self, groups: dict, class_names, params: TopsParams, class_face_areas=None):
        self.groups = groups
        self.class_names = list(class_names)
        self.params = params
        self.class_face_areas = dict(class_face_areas or {})

    def __getitem__(self, key):
        group, k = key
        if group not in self.groups or not 1 <= k <= self.params.max_slices:
            raise KeyError(key)
        return self.groups[group].for_k(k, self.params.block_size)

    def __iter__(self):
        for g in GROUPS:
            if g in self.groups:
                for k in range(1, self.params.max_slices + 1):
                    yield (g, k)

    def __len__(self):
        return len(self.groups) * self.params.max_slices

    @property
    def observed_max_slices(self):
        return int(max(t.n_s.max() for t in self.groups.values()))

    def with_max_slices(self, n):
        """Same rows cropped (or zero-extended) to ``n`` slice blocks."""
        params = replace(self.params, max_slices=int(n))
        width = params.length
        groups = {}
        for g, t in self.groups.items():
            X = t.X[:, :min(width, t.X.shape[1])]
            if X.shape[1] < width:
                X = sp.hstack([X, sp.csr_matrix((X.shape[0], width - X.shape[1]), dtype=X.dtype)], format="csr")
            groups[g] = GroupTable(sp.csr_matrix(X), t.y, np.minimum(t.n_s, n))
        return TrainingTables(groups, self.class_names, params, self.class_face_areas)


def cloud_descriptors(cloud, params: TopsParams, prep: PreprocessParams | None = PreprocessParams(),
                      augment: bool = True):
    """Descriptors of a raw view cloud: preprocess, normalize, mirror (x8)."""
    if prep is not None:
        cloud = preprocess(cloud, prep)
    normalized = view_normalize(cloud)
    variants = mirror_augment(normalized) if augment else [normalized]
    return [compute_tops(v, params) for v in variants]


def build_training_descriptors(view_sets: Mapping[str, ViewSets], params: TopsParams = TopsParams(),
                               prep: PreprocessParams | None = PreprocessParams(),
                               class_face_areas=None) -> TrainingTables:
    """``view_sets`` maps class label -> ViewSets of ``(pose, cloud)`` pairs."""
    class_names = sorted(view_sets)
    rows = {g: ([], [], []) for g in GROUPS}
    cache = {}
    for ci, label in enumerate(class_names):
        for group, views in view_sets[label].items():
            for pose, cloud in views:
                key = (label, id(cloud))
                if key not in cache:
                    try:
                        descs = cloud_descriptors(cloud, params, prep)
                    except DegenerateSegmentError as exc:
                        log.warning("skipping view of %s (%s)", label, exc)
                        descs = []
                    cache[key] = [(sp.csr_matrix(d.vector.astype(np.float32)), d.n_s) for d in descs]
                for vec, n_s in cache[key]:
                    rows[group][0].append(vec)
                    rows[group][1].append(ci)
                    rows[group][2].append(n_s)
    groups = {}
    for g, (vecs, ys, ns) in rows.items():
        if vecs:
            groups[g] = GroupTable(sp.vstack(vecs, format="csr"), np.array(ys), np.array(ns))
    return TrainingTables(groups, class_names, params, class_face_areas)


def tables_from_arrays(per_group, class_names, params: TopsParams, class_face_areas=None) -> TrainingTables:
    """Build tables from ``{group: (X dense/sparse, y, n_s)}``."""
    groups = {g: GroupTable(sp.csr_matrix(np.asarray(X, dtype=np.float32) if not sp.issparse(X) else X,
                                          dtype=np.float32),
                            np.asarray(y, dtype=np.int64), np.asarray(n_s, dtype=np.int64))
              for g, (X, y, n_s) in per_group.items()}
    return TrainingTables(groups, class_names, params, class_face_areas)


# ---------------------------------------------------------------------------
# library

@dataclass
class ClassifierLibrary:
    sets: dict  # group -> list of N_s classifiers, index 0 <-> k = 1
    class_names: list
    params_fingerprint: str
    class_face_areas: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def max_slices(self):
        return len(next(iter(self.sets.values())))

    def model(self, group, k):
        if not 1 <= k <= self.max_slices:
            raise IndexError(f"slice count {k} outside 1..{self.max_slices}")
        return self.sets[group][k - 1]

    def check(self, params: TopsParams):
        if params.fingerprint() != self.params_fingerprint:
            raise FingerprintMismatchError(
                f"library built for descriptor parameters {self.params_fingerprint}, "
                f"current parameters are {params.fingerprint()}")


def _slot_seed(seed, group, k):
    return [int(seed), GROUPS.index(group), int(k)]


def default_mlp_factory(config: MlpConfig = MlpConfig()):
    def make(seed):
        return MLPClassifier(config, seed=seed)
    return make


def train_library(tables: TrainingTables, classifier_factory=None, config: MlpConfig = MlpConfig(),
                  seed: int = 0, progress=None) -> ClassifierLibrary:
    """Fit one classifier per (group, k). ``classifier_factory(seed)`` returns
    an unfitted classifier; the default is the MLP with ``config``."""
    factory = classifier_factory or default_mlp_factory(config)
    n_classes = len(tables.class_names)
    sets, flags = {}, []
    for g in GROUPS:
        if g not in tables.groups:
            raise LibraryError(f"no training views for group {g!r}")
        models = []
        for k in range(1, tables.params.max_slices + 1):
            X, y = tables[(g, k)]
            if len(y) == 0:
                raise LibraryError(f"empty training table for {(g, k)}")
            if len(np.unique(y)) < 2:
                log.warning("slot %s/k=%d has a single class; using a constant model", g, k)
                flags.append(f"{g}/{k}")
                models.append(ConstantClassifier().fit(X, y, n_classes))
            else:
                rng_seed = int(np.random.SeedSequence(_slot_seed(seed, g, k)).generate_state(1)[0])
                models.append(factory(rng_seed).fit(X, y, n_classes))
            if progress:
                progress(g, k)
        sets[g] = models
    meta = {"seed": int(seed), "mlp_config": asdict(config), "tops_params": asdict(tables.params),
            "constant_slots": flags}
    return ClassifierLibrary(sets, list(tables.class_names), tables.params.fingerprint(),
                             {k: list(map(float, v)) for k, v in tables.class_face_areas.items()}, meta)


# ---------------------------------------------------------------------------
# persistence
#
# Archive layout (zip): ``meta.json`` plus ``models/<group>_<k>.bin``.
# Model blob, little endian:
#   8s  magic "TOPSMDL1"
#   I   kind (0 = MLP, 1 = constant)
#   I   n_classes
# constant: f4[n_classes] probabilities
# MLP:
#   I input_dim, I n_active, I n_layers, then n_layers x (I fan_in, I fan_out)
#   u4[n_active] active columns, f4[n_active] mean, f4[n_active] std
#   per layer: f4[fan_in * fan_out] weights (row-major), f4[fan_out] bias

def _model_bytes(model):
    buf = io.BytesIO()
    if isinstance(model, ConstantClassifier):
        buf.write(struct.pack("<8sII", _MAGIC, _KIND_CONST, len(model.probs)))
        buf.write(model.probs.astype("<f4").tobytes())
        return buf.getvalue()
    if not isinstance(model, MLPClassifier):
        raise LibraryError(f"cannot serialize {type(model).__name__}")
    buf.write(struct.pack("<8sII", _MAGIC, _KIND_MLP, len(model.classes_)))
    buf.write(struct.pack("<III", model.input_dim, len(model.active), len(model.weights)))
    for W in model.weights:
        buf.write(struct.pack("<II", *W.shape))
    buf.write(model.active.astype("<u4").tobytes())
    buf.write(model.mean.astype("<f4").tobytes())
    buf.write(model.std.astype("<f4").tobytes())
    for W, b in zip(model.weights, model.biases):
        buf.write(W.astype("<f4").tobytes())
        buf.write(b.astype("<f4").tobytes())
    return buf.getvalue()


def _model_from_bytes(raw, config):
    try:
        magic, kind, n_classes = struct.unpack_from("<8sII", raw, 0)
        if magic != _MAGIC:
            raise LibraryFormatError("bad model magic")
        off = 16
        if kind == _KIND_CONST:
            probs = np.frombuffer(raw, "<f4", n_classes, off).astype(np.float32)
            return ConstantClassifier(probs)
        input_dim, n_active, n_layers = struct.unpack_from("<III", raw, off)
        off += 12
        shapes = [struct.unpack_from("<II", raw, off + 8 * i) for i in range(n_layers)]
        off += 8 * n_layers

        def take(dtype, count):
            nonlocal off
            arr = np.frombuffer(raw, dtype, count, off)
            off += arr.nbytes
            return arr

        model = MLPClassifier(config)
        model.classes_ = np.arange(n_classes)
        model.input_dim = input_dim
        model.active = take("<u4", n_active).astype(np.int64)
        model.mean = take("<f4", n_active).astype(np.float32)
        model.std = take("<f4", n_active).astype(np.float32)
        for fi, fo in shapes:
            model.weights.append(take("<f4", fi * fo).reshape(fi, fo).astype(np.float32))
            model.biases.append(take("<f4", fo).astype(np.float32))
        if off != len(raw):
            raise LibraryFormatError("trailing bytes in model blob")
        return model
    except (struct.error, ValueError) as exc:
        raise LibraryFormatError(f"corrupt model blob: {exc}") from exc


def save_library(lib: ClassifierLibrary, path):
    path = Path(path)
    meta = {
        "format_version": FORMAT_VERSION,
        "class_names": lib.class_names,
        "params_fingerprint": lib.params_fingerprint,
        "class_face_areas": lib.class_face_areas,
        "groups": {g: len(models) for g, models in lib.sets.items()},
        **lib.metadata,
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("meta.json", json.dumps(meta, indent=2, sort_keys=True))
            for g, models in lib.sets.items():
                for k, model in enumerate(models, start=1):
                    zf.writestr(f"models/{g}_{k}.bin", _model_bytes(model))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_library(path, expected_params: TopsParams | None = None) -> ClassifierLibrary:
    try:
        with zipfile.ZipFile(path) as zf:
            bad = zf.testzip()
            if bad is not None:
                raise LibraryFormatError(f"checksum failure in {bad}")
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format_version") != FORMAT_VERSION:
                raise LibraryFormatError(f"unsupported library format {meta.get('format_version')}")
            config = MlpConfig.from_dict(meta.get("mlp_config", {}))
            sets = {}
            for g, n in meta["groups"].items():
                sets[g] = [_model_from_bytes(zf.read(f"models/{g}_{k}.bin"), config) for k in range(1, n + 1)]
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, EOFError, OSError) as exc:
        raise LibraryFormatError(f"cannot read library {path}: {exc}") from exc
    extra = {k: meta[k] for k in ("seed", "mlp_config", "tops_params", "constant_slots") if k in meta}
    lib = ClassifierLibrary(sets, list(meta["class_names"]), meta["params_fingerprint"],
                            meta.get("class_face_areas", {}), extra)
    if expected_params is not None:
        lib.check(expected_params)
    return lib


def canonical_face_areas(mesh_vertices, scale_factor: float):
    """(front, side, top) areas of the minimum-volume box of an object in scaled units."""
    box = min_volume_obb(np.asarray(mesh_vertices) * scale_factor)
    return box.face_areas()
