"""Reconstruction configuration: schema, defaults, presets, parsing.

Config files are YAML (JSON is accepted too).  Unknown keys and out-of-range
values raise :class:`ConfigError` naming the dotted field path, e.g.
``loss.lambda1``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .objective import LossConfig


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


GROUPS = ("mean", "intensity", "scale", "rotation", "motion_translation", "motion_rotation")


@dataclass
class LearningRates:
    mean_start: float = 2e-3
    mean_end: float = 2e-6
    intensity: float = 0.05
    scale: float = 0.005
    rotation: float = 0.001
    motion_translation: float = 5e-4
    motion_rotation: float = 5e-5


@dataclass
class StageConfig:
    name: str = "fine"
    resolution: int = 1
    iterations: int = 4000
    budget: int = 80000
    batch_slices: int = 0
    lr: dict = field(default_factory=dict)


@dataclass
class PsfConfig:
    samples: tuple = (1, 1, 5)
    inplane_fwhm_factor: float = 1.2
    through_plane_fwhm_factor: float = 1.0


@dataclass
class GaussianConfig:
    init_mode: str = "grid+backproject"
    init_scale_factor: float = 0.75
    scale_min: float = 0.2
    scale_max: float = 30.0
    cell_fraction: float = 1.0
    index_pad_fraction: float = 0.25
    calibrate_intensity: bool = True


@dataclass
class MotionConfig:
    init: str = "nominal"
    perturb_rotation_deg: float = 0.0
    perturb_translation_mm: float = 0.0


@dataclass
class ConvergenceConfig:
    max_restarts: int = 3
    checkpoint_every: int = 50
    rel_tol: float = 0.0
    window: int = 100


@dataclass
class ReconConfig:
    stages: list = field(default_factory=lambda: [
        StageConfig("coarse", 2, 2000, 20000),
        StageConfig("fine", 1, 4000, 80000),
    ])
    lr: LearningRates = field(default_factory=LearningRates)
    loss: LossConfig = field(default_factory=LossConfig)
    psf: PsfConfig = field(default_factory=PsfConfig)
    gaussians: GaussianConfig = field(default_factory=GaussianConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    convergence: ConvergenceConfig = field(default_factory=ConvergenceConfig)
    seed: int = 0
    length_scale: float = 0.0
    volume_spacing: float = 0.0
    threads: int = 1

    @property
    def total_iterations(self) -> int:
        return sum(s.iterations for s in self.stages)


# -- validation --------------------------------------------------------------

def validate(cfg: ReconConfig) -> ReconConfig:
    def need(cond, path, msg):
        if not cond:
            raise ConfigError(path, msg)

    need(len(cfg.stages) >= 1, "stages", "at least one stage is required")
    prev = None
    for i, st in enumerate(cfg.stages):
        p = f"stages[{i}]"
        need(isinstance(st.resolution, int) and st.resolution >= 1, f"{p}.resolution",
             "resolution factor must be an integer >= 1")
        need(st.iterations >= 0, f"{p}.iterations", "must be >= 0")
        need(st.budget >= 8, f"{p}.budget", "must be >= 8")
        need(st.batch_slices >= 0, f"{p}.batch_slices", "must be >= 0 (0 = all slices)")
        if prev is not None:
            need(st.resolution <= prev, f"{p}.resolution", "stages must be ordered coarse to fine")
        prev = st.resolution
        for k, v in st.lr.items():
            need(k in GROUPS and k != "mean", f"{p}.lr.{k}",
                 "unknown learning-rate group (the mean rate decays globally)")
            need(_num(v) and v >= 0, f"{p}.lr.{k}", "must be a non-negative number")
    for f in dataclasses.fields(LearningRates):
        v = getattr(cfg.lr, f.name)
        need(_num(v) and v >= 0, f"lr.{f.name}", "must be a non-negative number")
    need(cfg.lr.mean_start > 0 and cfg.lr.mean_end > 0, "lr.mean_start",
         "mean learning rates must be positive for exponential decay")
    lc = cfg.loss
    need(lc.lambda1 >= 0, "loss.lambda1", "must be >= 0")
    need(lc.lambda2 >= 0, "loss.lambda2", "must be >= 0")
    need(lc.ssim_window >= 1 and lc.ssim_window % 2 == 1, "loss.ssim_window", "must be odd")
    need(lc.ssim_sigma > 0, "loss.ssim_sigma", "must be positive")
    need(lc.dynamic_range > 0, "loss.dynamic_range", "must be positive")
    need(len(lc.tv_crop) == 3 and min(lc.tv_crop) >= 2, "loss.tv_crop", "three sizes >= 2")
    ps = cfg.psf
    need(len(ps.samples) == 3 and all(int(n) >= 1 and int(n) % 2 == 1 for n in ps.samples),
         "psf.samples", "three odd integers >= 1")
    need(ps.inplane_fwhm_factor > 0, "psf.inplane_fwhm_factor", "must be positive")
    need(ps.through_plane_fwhm_factor > 0, "psf.through_plane_fwhm_factor", "must be positive")
    gc = cfg.gaussians
    need(gc.init_mode in ("grid+backproject", "grid"), "gaussians.init_mode", "unknown mode")
    need(gc.init_scale_factor > 0, "gaussians.init_scale_factor", "must be positive")
    need(0 < gc.scale_min < gc.scale_max, "gaussians.scale_min", "need 0 < scale_min < scale_max")
    need(gc.cell_fraction > 0, "gaussians.cell_fraction", "must be positive")
    need(gc.index_pad_fraction >= 0, "gaussians.index_pad_fraction", "must be >= 0")
    need(cfg.motion.init in ("nominal", "oracle-perturbed"), "motion.init", "nominal or oracle-perturbed")
    need(cfg.motion.perturb_rotation_deg >= 0, "motion.perturb_rotation_deg", "must be >= 0")
    need(cfg.motion.perturb_translation_mm >= 0, "motion.perturb_translation_mm", "must be >= 0")
    need(cfg.convergence.max_restarts >= 0, "convergence.max_restarts", "must be >= 0")
    need(cfg.convergence.checkpoint_every >= 1, "convergence.checkpoint_every", "must be >= 1")
    need(cfg.convergence.rel_tol >= 0, "convergence.rel_tol", "must be >= 0")
    need(cfg.convergence.window >= 1, "convergence.window", "must be >= 1")
    need(cfg.length_scale >= 0, "length_scale", "must be >= 0 (0 = automatic)")
    need(cfg.volume_spacing >= 0, "volume_spacing", "must be >= 0 (0 = automatic)")
    need(cfg.threads >= 1, "threads", "must be >= 1")
    return cfg


def _num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


# -- dict <-> dataclass -----------------------------------------------------

_NESTED = {
    "lr": LearningRates, "loss": LossConfig, "psf": PsfConfig, "gaussians": GaussianConfig,
    "motion": MotionConfig, "convergence": ConvergenceConfig,
}


def _coerce(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, "expected an integer")
        return value
    if isinstance(default, float):
        if not _num(value):
            raise ConfigError(path, "expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not all(_num(v) for v in value):
            raise ConfigError(path, "expected a list of numbers")
        return tuple(type(default[0])(v) if default else v for v in value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected a mapping")
        return dict(value)
    return value


def _build(cls, data, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(path, "expected a mapping")
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in known:
            raise ConfigError(f"{path}.{k}" if path else str(k), "unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        sub = f"{path}.{f.name}" if path else f.name
        default = getattr(defaults, f.name)
        if f.name not in data:
            kwargs[f.name] = default
            continue
        value = data[f.name]
        if cls is ReconConfig and f.name in _NESTED:
            kwargs[f.name] = _build(_NESTED[f.name], value, sub)
        elif cls is ReconConfig and f.name == "stages":
            if not isinstance(value, list):
                raise ConfigError(sub, "expected a list of stages")
            kwargs[f.name] = [_build(StageConfig, s, f"{sub}[{i}]") for i, s in enumerate(value)]
        else:
            kwargs[f.name] = _coerce(value, default, sub)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        msg = str(exc)
        field_path = msg.split(" ")[0] if "." in msg.split(" ")[0] else path
        raise ConfigError(field_path, msg) from None


def from_dict(data) -> ReconConfig:
    return validate(_build(ReconConfig, data, ""))


def to_dict(cfg: ReconConfig) -> dict:
    d = dataclasses.asdict(cfg)

    def fix(v):
        if isinstance(v, tuple):
            return [fix(x) for x in v]
        if isinstance(v, list):
            return [fix(x) for x in v]
        if isinstance(v, dict):
            return {k: fix(x) for k, x in v.items()}
        return v

    return fix(d)


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def preset_dict(name: str) -> dict:
    try:
        text = resources.files("gsvr").joinpath("presets", f"{name}.yaml").read_text()
    except FileNotFoundError:
        raise ConfigError("preset", f"unknown preset {name!r}") from None
    return yaml.safe_load(text) or {}


def load_config_dict(path) -> dict:
    """Read a YAML/JSON config, or the effective config recorded in a run log."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".jsonl":
        for line in text.splitlines():
            rec = json.loads(line)
            if rec.get("event") == "config":
                return rec["config"]
        raise ConfigError("", f"{path} contains no config record")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"cannot parse {path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("", "top level of a config file must be a mapping")
    return data


def parse_config(path=None, preset=None, overrides=None) -> ReconConfig:
    """Defaults, then the preset, then the file, then ``overrides``."""
    data = {}
    if preset:
        data = merge(data, preset_dict(preset))
    if path is not None:
        data = merge(data, load_config_dict(path))
    if overrides:
        data = merge(data, overrides)
    return from_dict(data)


def dump_config(cfg: ReconConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)
