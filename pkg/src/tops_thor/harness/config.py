"""Run configuration: every tunable of the pipeline in one JSON-serializable object."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from ..descriptor import TopsParams
from ..library import MlpConfig
from ..pointcloud import PreprocessParams
from ..recognition import RecognitionConfig
from ..views import CameraModel


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    step: float = math.pi / 36
    radius: float | None = None
    dedupe_poles: bool = True
    tie_deg: float = 10.0
    min_points: int = 10


@dataclass(frozen=True)
class RunConfig:
    tops: TopsParams = field(default_factory=TopsParams)
    preprocess: PreprocessParams = field(default_factory=PreprocessParams)
    mlp: MlpConfig = field(default_factory=MlpConfig)
    camera: CameraModel = field(default_factory=CameraModel)
    render: RenderConfig = field(default_factory=RenderConfig)
    use_heuristics: bool = True
    tolerance: float = 0.2
    curvature_k: int = 20
    min_face_points: int = 10
    occlusion_threshold: float = 0.01
    min_instance_pixels: int = 10
    seed: int = 0
    folds: int = 5
    workers: int = 1
    classes: tuple = ()
    manifest: str | None = None
    library: str | None = None
    meshes: str | None = None
    output: str | None = None

    def __post_init__(self):
        if not 0 <= self.tolerance < 1:
            raise ConfigError("tolerance must lie in [0, 1)")
        if self.folds != 5:
            raise ConfigError("the evaluation protocol uses exactly 5 folds")
        if self.workers < 1 or self.curvature_k < 3:
            raise ConfigError("workers >= 1 and curvature_k >= 3 required")
        if not 0 < self.occlusion_threshold <= 1:
            raise ConfigError("occlusion_threshold must lie in (0, 1]")

    def recognition(self) -> RecognitionConfig:
        return RecognitionConfig(self.tops, self.preprocess, self.tolerance, self.use_heuristics,
                                 self.curvature_k, self.min_face_points, self.occlusion_threshold,
                                 self.min_instance_pixels)

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


_NESTED = {"tops": TopsParams, "preprocess": PreprocessParams, "mlp": MlpConfig,
           "camera": CameraModel, "render": RenderConfig}


def _build(cls, d):
    if cls is TopsParams:
        return TopsParams.from_dict(d)
    if cls is MlpConfig:
        return MlpConfig.from_dict(d)
    return cls(**d)


def from_dict(d: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kw = {}
    try:
        for key, value in d.items():
            if key in _NESTED:
                kw[key] = _build(_NESTED[key], value) if isinstance(value, dict) else value
            elif key == "classes":
                kw[key] = tuple(value)
            else:
                kw[key] = value
        return RunConfig(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return from_dict(d)


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_path(obj, keys, value):
    head, rest = keys[0], keys[1:]
    if not is_dataclass(obj) or head not in {f.name for f in fields(obj)}:
        raise ConfigError(f"unknown config field {head!r}")
    if rest:
        value = _set_path(getattr(obj, head), rest, value)
    elif isinstance(getattr(obj, head), tuple) and isinstance(value, list):
        value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return replace(obj, **{head: value})


def apply_overrides(config: RunConfig, pairs) -> RunConfig:
    """Apply ``key.sub=value`` strings; values are parsed as JSON when possible."""
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, text = pair.split("=", 1)
        try:
            config = _set_path(config, key.strip().split("."), _parse_value(text))
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    return config


def slice_variant(config: RunConfig, alpha: float, sigma1: float, sigma2: float) -> RunConfig:
    tops = replace(config.tops, alpha=alpha, slice=replace(config.tops.slice, sigma1=sigma1, sigma2=sigma2))
    return replace(config, tops=tops)


__all__ = ["ConfigError", "RenderConfig", "RunConfig", "apply_overrides", "from_dict", "load_config",
           "slice_variant"]
