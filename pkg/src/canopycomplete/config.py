"""Run configuration: one human-editable YAML document covering the whole
pipeline, with strict unknown-key rejection and environment overrides.

Every field has a default, so an empty document is a valid config. Env
vars prefixed ``CANOPYCOMPLETE_`` override file values for CI, with
double underscores separating nesting levels, e.g.
``CANOPYCOMPLETE_TRAIN__MAX_EPOCHS=50``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import DataFileError
from .network import NetworkConfig
from .popsim import STAGES, PlotLayout
from .training import TrainConfig

ENV_PREFIX = "CANOPYCOMPLETE_"


@dataclass(frozen=True)
class CameraConfig:
    count: int = 36
    distance: float = 5.0
    elevation_deg: float = 60.0


@dataclass(frozen=True)
class OcclusionConfig:
    self_eps: float = 1e-4


@dataclass(frozen=True)
class DatasetConfig:
    count_per_stage: dict = field(default_factory=lambda: {s: 1000 for s in STAGES})
    split_fraction: float = 0.8
    rotate_yaw: bool = False


@dataclass(frozen=True)
class SeiConfig:
    voxel_edge: float = 0.01
    plane_area: float | None = None      # None: derive from the layout
    plane_area_mode: str = "grid_margin"  # or "hull"

    def __post_init__(self):
        if self.plane_area_mode not in ("grid_margin", "hull"):
            raise ValueError(f"unknown plane_area_mode {self.plane_area_mode!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int | None = None
    camera: CameraConfig = field(default_factory=CameraConfig)
    layout: PlotLayout = field(default_factory=PlotLayout)
    occlusion: OcclusionConfig = field(default_factory=OcclusionConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sei: SeiConfig = field(default_factory=SeiConfig)


_SECTIONS = {
    "camera": CameraConfig,
    "layout": PlotLayout,
    "occlusion": OcclusionConfig,
    "dataset": DatasetConfig,
    "network": NetworkConfig,
    "train": TrainConfig,
    "sei": SeiConfig,
}
_SCALARS = ("seed", "threads")


def _fields_of(cls):
    return set(cls.__dataclass_fields__)


def _build_section(name, cls, doc, path):
    if not isinstance(doc, dict):
        raise DataFileError(path, f"section /{name} must be a mapping")
    allowed = _fields_of(cls)
    for key in doc:
        if key not in allowed:
            raise DataFileError(path, f"unknown config key /{name}/{key}")
    coerced = dict(doc)
    for key in ("layer_dims", "disc_dims", "disc_classifier", "blocks"):
        if key in coerced:
            coerced[key] = tuple(coerced[key])
    if "alpha_schedule" in coerced:
        coerced["alpha_schedule"] = tuple(
            (int(s), float(a)) for s, a in coerced["alpha_schedule"])
    if name == "dataset" and "count_per_stage" in coerced:
        counts = coerced["count_per_stage"]
        for stage in counts:
            if stage not in STAGES:
                raise DataFileError(path, f"unknown stage /dataset/count_per_stage/{stage}")
        coerced["count_per_stage"] = dict(counts)
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as e:
        raise DataFileError(path, f"invalid /{name} section: {e}")


def _apply_env_overrides(doc: dict, environ) -> dict:
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in doc.items()}
    for var, raw in sorted(environ.items()):
        if not var.startswith(ENV_PREFIX):
            continue
        tail = var[len(ENV_PREFIX):].lower()
        parts = tail.split("__")
        value = yaml.safe_load(raw)
        if len(parts) == 1:
            out[parts[0]] = value
        elif len(parts) == 2:
            out.setdefault(parts[0], {})
            if not isinstance(out[parts[0]], dict):
                out[parts[0]] = {}
            out[parts[0]][parts[1]] = value
        else:
            raise ValueError(f"environment override {var} nests too deep")
    return out


def config_from_dict(doc: dict, path="<config>", environ=None) -> RunConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise DataFileError(path, "config document must be a mapping")
    if environ is not None:
        doc = _apply_env_overrides(doc, environ)
    for key in doc:
        if key not in _SECTIONS and key not in _SCALARS:
            raise DataFileError(path, f"unknown config key /{key}")
    kwargs = {}
    for key in _SCALARS:
        if key in doc:
            kwargs[key] = doc[key]
    for name, cls in _SECTIONS.items():
        if name in doc:
            kwargs[name] = _build_section(name, cls, doc[name], path)
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise DataFileError(path, f"invalid config: {e}")


def load_config(path=None, environ=None) -> RunConfig:
    """Config from a YAML file (or pure defaults when path is None), with
    environment overrides applied on top."""
    environ = os.environ if environ is None else environ
    if path is None:
        return config_from_dict({}, environ=environ)
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise DataFileError(p, f"cannot read config: {e.strerror}")
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise DataFileError(p, f"invalid YAML: {e}", line=None if mark is None else mark.line + 1)
    return config_from_dict(doc, path=p, environ=environ)


def config_to_dict(cfg: RunConfig) -> dict:
    return {
        "seed": cfg.seed,
        "threads": cfg.threads,
        "camera": vars(cfg.camera).copy(),
        "layout": {"rows": cfg.layout.rows, "cols": cfg.layout.cols,
                   "row_spacing": cfg.layout.row_spacing,
                   "plant_spacing": cfg.layout.plant_spacing},
        "occlusion": vars(cfg.occlusion).copy(),
        "dataset": {"count_per_stage": dict(cfg.dataset.count_per_stage),
                    "split_fraction": cfg.dataset.split_fraction,
                    "rotate_yaw": cfg.dataset.rotate_yaw},
        "network": cfg.network.to_dict(),
        "train": cfg.train.to_dict(),
        "sei": {"voxel_edge": cfg.sei.voxel_edge, "plane_area": cfg.sei.plane_area,
                "plane_area_mode": cfg.sei.plane_area_mode},
    }


def save_config(path, cfg: RunConfig):
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))
