"""Run configuration: a strict JSON document with a ``version`` field.

Parsing fills defaults and rejects unknown keys; ``dumps`` writes every field in
a fixed order, so dump -> parse -> dump is byte-identical.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .descriptors import DescriptorFieldParams
from .errors import ConfigError
from .loopclosure import LoopParams, RegistrationSim
from .posegraph import LmParams
from .sampling import SCORING_MODES, SamplerConfig
from .synthworld import TRAJECTORY_KINDS, TrajectorySpec, WorldConfig

CONFIG_VERSION = 1
SAMPLER_NAMES = ("all", "msa", "constant", "entropy", "spaciousness")
POSE_FORMATS = ("kitti", "tum")


@dataclass(frozen=True)
class FieldSpec:
    dim: int = 256
    num_frequencies: int = 256
    length_scale: float = 10.0
    noise_sigma: float = 0.0


@dataclass(frozen=True)
class SyntheticSource:
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    keyframe_spacing: float = 1.0
    odom_sigma_t: float = 0.05
    odom_sigma_r: float = 0.002
    field: FieldSpec = field(default_factory=FieldSpec)
    spaciousness_field_scale: float = 6.0


@dataclass(frozen=True)
class FileSource:
    """Pose/descriptor files. Without ``odometry`` the ground truth doubles as odometry."""

    poses: str = ""
    format: str = "kitti"
    descriptors: str = ""
    odometry: str | None = None
    channels: str | None = None


@dataclass(frozen=True)
class DatasetConfig:
    type: str = "synthetic"
    synthetic: SyntheticSource | None = field(default_factory=SyntheticSource)
    files: FileSource | None = None


@dataclass(frozen=True)
class MethodConfig:
    name: str = "all"
    distance: float | None = None  # constant sampler only
    window_size: int = 10
    alpha: float = 1.0
    beta: float = 1.0
    delta_lower: float = 1.0
    delta_upper: float = 5.0
    scoring_mode: str = "paper-literal"

    @property
    def label(self) -> str:
        if self.name == "constant" and self.distance is not None:
            return f"constant-{self.distance:g}m"
        return self.name

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(self.window_size, self.alpha, self.beta, self.delta_lower,
                             self.delta_upper, self.scoring_mode)


@dataclass(frozen=True)
class LoopConfig:
    tau: float = 0.8
    k: int = 1
    exclusion_gap: int = 50
    gt_radius: float = 1.0
    threshold: float = 0.3
    sigma_t: float = 0.1
    sigma_r: float = 0.01
    sigma_res: float = 0.05
    fp_residual_low: float = 0.2
    fp_residual_high: float = 5.0
    info_sigma_floor: float = 1e-3
    timing_repeats: int = 1

    def params(self, seed: int) -> LoopParams:
        reg = RegistrationSim(self.sigma_t, self.sigma_r, self.sigma_res, self.fp_residual_low,
                              self.fp_residual_high, self.threshold, seed)
        return LoopParams(self.tau, self.k, self.exclusion_gap, self.gt_radius, reg,
                          self.info_sigma_floor, self.timing_repeats)


@dataclass(frozen=True)
class OdometryInfo:
    """Per-step odometry noise used to weight (composed) odometry edges."""

    sigma_t: float = 0.05
    sigma_r: float = 0.002


@dataclass(frozen=True)
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    methods: tuple = (MethodConfig("all"), MethodConfig("msa"))
    loop: LoopConfig = field(default_factory=LoopConfig)
    lm: LmParams = field(default_factory=LmParams)
    odometry_info: OdometryInfo = field(default_factory=OdometryInfo)
    reopt_every: int = 10
    rpe_delta: int = 1
    record_timing: bool = True
    output_dir: str = "out"

    def world_config(self) -> WorldConfig:
        s = self.dataset.synthetic
        f = s.field
        return WorldConfig(
            seed=self.seed, trajectory=s.trajectory, keyframe_spacing=s.keyframe_spacing,
            odom_sigma_t=s.odom_sigma_t, odom_sigma_r=s.odom_sigma_r,
            field=DescriptorFieldParams(self.seed, f.dim, f.num_frequencies, f.length_scale, f.noise_sigma),
            spaciousness_field_scale=s.spaciousness_field_scale,
            gt_radius=self.loop.gt_radius, exclusion_gap=self.loop.exclusion_gap,
        )

    def loop_params(self) -> LoopParams:
        return self.loop.params(self.seed)

    def with_overrides(self, seed=None, methods=None, output_dir=None) -> RunConfig:
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=int(seed))
        if methods:
            keep = tuple(m for m in cfg.methods if m.label in methods or m.name in methods)
            known = {m.label for m in cfg.methods} | {m.name for m in cfg.methods}
            missing = [m for m in methods if m not in known]
            if missing:
                raise ConfigError(f"--method {missing[0]!r} is not configured")
            cfg = dataclasses.replace(cfg, methods=keep)
        if output_dir is not None:
            cfg = dataclasses.replace(cfg, output_dir=str(output_dir))
        return cfg


# -- (de)serialisation ---------------------------------------------------------------------

_NESTED = {
    (RunConfig, "dataset"): DatasetConfig,
    (RunConfig, "loop"): LoopConfig,
    (RunConfig, "lm"): LmParams,
    (RunConfig, "odometry_info"): OdometryInfo,
    (DatasetConfig, "synthetic"): SyntheticSource,
    (DatasetConfig, "files"): FileSource,
    (SyntheticSource, "trajectory"): TrajectorySpec,
    (SyntheticSource, "field"): FieldSpec,
}


def _check_scalar(cls, name, value, default):
    where = f"{cls.__name__}.{name}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
    elif isinstance(default, int) and not isinstance(default, bool):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{where} must be an integer")
    elif isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where} must be a string")
    return value


def _build(cls, data: Any):
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in {cls.__name__}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        if sub is not None:
            kwargs[name] = None if value is None else _build(sub, value)
        elif cls is RunConfig and name == "methods":
            if not isinstance(value, list):
                raise ConfigError("methods must be a list")
            kwargs[name] = tuple(_build(MethodConfig, m) for m in value)
        elif value is None:
            kwargs[name] = None
        else:
            default = getattr(defaults, name)
            kwargs[name] = _check_scalar(cls, name, value, default) if default is not None else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {cfg.version}")
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if not cfg.methods:
        raise ConfigError("at least one method is required")
    labels = [m.label for m in cfg.methods]
    if len(set(labels)) != len(labels):
        raise ConfigError("method labels must be unique")
    for m in cfg.methods:
        if m.name not in SAMPLER_NAMES:
            raise ConfigError(f"unknown method {m.name!r}")
        if m.name == "constant" and not (m.distance and m.distance > 0):
            raise ConfigError("constant method needs a positive distance")
        if m.scoring_mode not in SCORING_MODES:
            raise ConfigError(f"scoring_mode must be one of {SCORING_MODES}")
        try:
            m.sampler_config()
        except ValueError as exc:
            raise ConfigError(f"method {m.label}: {exc}") from None
    ds = cfg.dataset
    if ds.type == "synthetic":
        if ds.synthetic is None:
            raise ConfigError("synthetic dataset needs a 'synthetic' section")
        if ds.synthetic.trajectory.kind not in TRAJECTORY_KINDS:
            raise ConfigError(f"trajectory kind must be one of {TRAJECTORY_KINDS}")
    elif ds.type == "files":
        f = ds.files
        if f is None or not f.poses or not f.descriptors:
            raise ConfigError("files dataset needs 'poses' and 'descriptors'")
        if f.format not in POSE_FORMATS:
            raise ConfigError(f"pose format must be one of {POSE_FORMATS}")
    else:
        raise ConfigError("dataset.type must be 'synthetic' or 'files'")
    if cfg.reopt_every < 1 or cfg.rpe_delta < 1:
        raise ConfigError("reopt_every and rpe_delta must be >= 1")
    try:
        cfg.loop_params()
        if ds.type == "synthetic":
            cfg.world_config()
        if cfg.odometry_info.sigma_t <= 0 or cfg.odometry_info.sigma_r <= 0:
            raise ValueError("odometry_info sigmas must be positive")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def parse(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    if not isinstance(data, dict) or "version" not in data:
        raise ConfigError("config must be a JSON object with a 'version' field")
    return validate(_build(RunConfig, data))


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse(text)


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def dumps(cfg: RunConfig) -> str:
    d = to_dict(cfg)
    d["methods"] = list(d["methods"])
    return json.dumps(d, indent=2) + "\n"
