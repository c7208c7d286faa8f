"""Configuration schema: one structured document covering every module.

Configs load from YAML, apply dotted-key overrides, reject unknown keys, and
echo their fully resolved form into every output manifest.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class GeometryConfig:
    grid: int = 64
    h_max: float = 1.0
    slab_height: float = 0.8
    theta_max_deg: float = 30.0
    eval_points: int = 2048  # point-cloud size for shape-error evaluation

    @property
    def theta_max(self) -> float:
        return math.radians(self.theta_max_deg)


@dataclass
class EnvConfig:
    task_steps: int = 64  # T
    shape_id: str = "A"
    material: str = "ASA"
    eta_asa: float = 0.15
    eta_pc: float = 0.35
    belt_speed: float = 1.0

    def eta(self, material: str | None = None) -> float:
        m = (material or self.material).upper()
        if m == "ASA":
            return self.eta_asa
        if m == "PC":
            return self.eta_pc
        raise ConfigError(f"unknown material {m!r}; expected ASA or PC")


@dataclass
class DatagenConfig:
    episodes: int = 2000  # K
    episode_steps: int = 64  # steps per episode
    eps_vol: float = 0.02  # per-step removal volume cap
    d_vol: float = 0.006  # reference-shape overcut cap
    max_tries: int = 200  # rejection-sampling budget before no-contact fallback


@dataclass
class CodecConfig:
    latent_dim: int = 64
    hidden: tuple = (512, 128)
    beta_kl: float = 1e-3
    train_steps: int = 2500
    batch: int = 64
    lr: float = 1e-3
    holdout: int = 512  # shapes reserved for the round-trip evaluation
    pool: int = 16384  # training pool subsampled from the dataset


@dataclass
class DiffuserConfig:
    horizon: int = 16  # H at training time
    diffusion_steps: int = 64  # N
    widths: tuple = (64, 128, 256)
    groups: int = 8  # group-norm groups
    arch: str = "unet"  # "mlp" is a debug fallback for horizons <= 8
    train_steps: int = 5000
    batch: int = 32
    lr: float = 3e-3  # peak rate; warmup then cosine decay to 5% of peak
    lr_warmup: int = 250
    grad_clip: float = 1.0  # global gradient norm bound, 0 disables
    ema: float = 0.999  # weight moving-average decay, 0 disables
    cond_frac: float = 0.5  # share of each batch trained with pinned start latents


@dataclass
class GuidanceConfig:
    lambda_sm: float = 1.0
    lambda_col: float = 10.0
    lambda_vol: float = 10.0
    delta_vol: float = 0.02  # per-step volume limit; same units as eps_vol
    guide_scale: float = 0.5
    guide_steps: int = 32  # guidance active for the last guide_steps denoising steps
    travel_frac: float = 0.1  # per-dim travel bound as a fraction of the action range

    def __post_init__(self):
        if self.lambda_col <= self.lambda_sm or self.lambda_vol <= self.lambda_sm:
            raise ConfigError(
                "volume/overcut weights must dominate the smoothness weight "
                f"(got lambda_col={self.lambda_col}, lambda_vol={self.lambda_vol}, "
                f"lambda_sm={self.lambda_sm})")


@dataclass
class CvaeConfig:
    latent_dim: int = 64  # trajectory latent u
    widths: tuple = (64, 128, 256)
    groups: int = 8
    beta_kl: float = 1e-2
    train_steps: int = 2500
    batch: int = 32
    lr: float = 1e-3
    refine_steps: int = 20
    refine_lr: float = 0.3
    prior_weight: float = 1e-3


@dataclass
class PlannerConfig:
    horizon: int = 16  # H at planning time
    exec_steps: int = 16  # M actions executed per replan
    two_step: bool = True
    guided: bool = True
    n_candidates: int = 1024  # random-shooting candidates
    score_points: int = 1024  # point-cloud size for candidate scoring


@dataclass
class Config:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    datagen: DatagenConfig = field(default_factory=DatagenConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    diffuser: DiffuserConfig = field(default_factory=DiffuserConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    cvae: CvaeConfig = field(default_factory=CvaeConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return _as_plain(dataclasses.asdict(self))


def _as_plain(obj):
    if isinstance(obj, dict):
        return {k: _as_plain(v) for k, v in obj.items()}
    if isinstance(obj, tuple):
        return [_as_plain(v) for v in obj]
    if isinstance(obj, list):
        return [_as_plain(v) for v in obj]
    return obj


def _build_section(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where!r}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        if f.type in ("int",) or isinstance(f.default, int) and not isinstance(f.default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
                raise ConfigError(f"{where}.{name} must be an integer, got {value!r}")
            value = int(value)
        elif isinstance(f.default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{name} must be a boolean, got {value!r}")
        elif isinstance(f.default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{name} must be a number, got {value!r}")
            value = float(value)
        elif isinstance(f.default, str):
            if not isinstance(value, str):
                raise ConfigError(f"{where}.{name} must be a string, got {value!r}")
        elif isinstance(f.default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where}.{name} must be a list, got {value!r}")
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


_SECTIONS = {
    "geometry": GeometryConfig,
    "env": EnvConfig,
    "datagen": DatagenConfig,
    "codec": CodecConfig,
    "diffuser": DiffuserConfig,
    "guidance": GuidanceConfig,
    "cvae": CvaeConfig,
    "planner": PlannerConfig,
}


def config_from_dict(data: dict) -> Config:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"top-level config must be a mapping, got {type(data).__name__}")
    unknown = set(data) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build_section(cls, data[name], name)
    if "seed" in data:
        seed = data["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        kwargs["seed"] = seed
    return Config(**kwargs)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                seed: int | None = None) -> Config:
    """Load a YAML config file, apply key=value overrides, resolve the seed."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = yaml.safe_load(p.read_text())
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {p} is not valid YAML: {e}") from e
        if loaded is not None:
            if not isinstance(loaded, dict):
                raise ConfigError(f"config file {p} must contain a mapping")
            data = loaded
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"override value {raw!r} is not valid YAML: {e}") from e
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = value
    cfg = config_from_dict(data)
    if seed is not None:
        cfg.seed = seed
    return cfg
