"""Model and run configuration.

Run configs are plain ``key=value`` text files. Defaults follow the
published model size; :data:`DESK_PROFILE` holds the CPU-scale overrides.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    keypoints: int = 15
    levels: int = 4
    base_channels: int = 64
    memory_c: int = 512
    memory_h: int = 32
    memory_w: int = 32
    image_size: int = 256
    motion_size: int = 64
    kp_block: int = 32
    kp_depth: int = 5
    motion_block: int = 64
    motion_depth: int = 5
    max_channels: int = 1024
    temperature: float = 0.1
    kp_sigma: float = 0.1
    pe_L: int = 0
    n_kernels: int = 4
    attention_scaling: bool = True
    query_bias: bool = True
    occlusion: bool = False
    demod_eps: float = 1e-8

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError("model.levels must be >= 1")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and f.name != "pe_L" and v <= 0:
                raise ConfigError(f"model.{f.name} must be positive, got {v}")
        if self.pe_L < 0:
            raise ConfigError("model.pe_L must be >= 0")
        if self.image_size % (2 ** self.levels):
            raise ConfigError(f"model.image_size {self.image_size} not divisible by 2^{self.levels}")
        if self.base_channels < 2:
            raise ConfigError("model.base_channels must be >= 2 for the channel split")
        for name, depth in (("kp", self.kp_depth), ("motion", self.motion_depth)):
            if self.motion_size % (2 ** depth):
                raise ConfigError(f"model.motion_size {self.motion_size} not divisible by 2^{name}_depth")
        size = self.image_size
        while size > self.motion_size:
            size //= 2
        if size != self.motion_size:
            raise ConfigError("model.motion_size must be image_size / 2^n")

    def channels(self, level: int) -> int:
        """Channels of encoder level ``level`` (1-based)."""
        return self.base_channels * 2 ** (level - 1)


@dataclass
class LossConfig:
    lambda_p: float = 10.0
    lambda_eq: float = 10.0
    lambda_dist: float = 10.0
    lambda_con: float = 10.0
    alpha: float = 0.2
    con_levels: str = "all"


@dataclass
class TrainConfig:
    steps: int = 1000
    batch: int = 8
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    precision: int = 32
    ckpt_every: int = 500
    log_every: int = 1

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


@dataclass
class DataConfig:
    manifest: str = ""
    out_dir: str = "run"
    eval_manifest: str = ""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_text(self) -> str:
        lines = []
        for section in ("model", "loss", "train", "data"):
            for k, v in asdict(getattr(self, section)).items():
                lines.append(f"{section}.{k}={_format(v)}")
        return "\n".join(lines) + "\n"


# memory.c/h/w are spelled with dots in config files
_ALIASES = {"model.memory.c": "model.memory_c", "model.memory.h": "model.memory_h",
            "model.memory.w": "model.memory_w"}

DESK_PROFILE = {
    "model.keypoints": "5",
    "model.levels": "3",
    "model.base_channels": "16",
    "model.memory.c": "32",
    "model.memory.h": "8",
    "model.memory.w": "8",
    "model.image_size": "64",
    "model.motion_size": "32",
    "model.kp_block": "16",
    "model.kp_depth": "3",
    "model.motion_block": "16",
    "model.motion_depth": "3",
    "model.max_channels": "64",
}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(value: str, kind, key: str):
    try:
        if kind is bool or kind == "bool":
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int or kind == "int":
            return int(value)
        if kind is float or kind == "float":
            return float(value)
        return value.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def apply_overrides(cfg: RunConfig, items: dict[str, str]) -> RunConfig:
    sections = {"model": asdict(cfg.model), "loss": asdict(cfg.loss),
                "train": asdict(cfg.train), "data": asdict(cfg.data)}
    types = {s: {f.name: f.type for f in fields(getattr(cfg, s))} for s in sections}
    for raw_key, value in items.items():
        key = _ALIASES.get(raw_key, raw_key)
        section, _, name = key.partition(".")
        if section not in sections or name not in sections[section]:
            raise ConfigError(f"unknown config key: {raw_key}")
        sections[section][name] = _coerce(value, types[section][name], raw_key)
    cfg = RunConfig(ModelConfig(**sections["model"]), LossConfig(**sections["loss"]),
                    TrainConfig(**sections["train"]), DataConfig(**sections["data"]))
    if cfg.train.precision not in (32, 64):
        raise ConfigError("train.precision must be 32 or 64")
    return cfg


def parse_config_text(text: str) -> dict[str, str]:
    items: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        items[k.strip()] = v.strip()
    return items


PROFILES = {"full": {}, "desk": DESK_PROFILE}


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read a config file, then apply ``overrides`` (which win).

    A ``profile`` key (``full`` or ``desk``) selects the base values the
    remaining keys are applied on top of.
    """
    items: dict[str, str] = {}
    if path is not None:
        items.update(parse_config_text(Path(path).read_text()))
    if overrides:
        items.update(overrides)
    profile = items.pop("profile", "full")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    base = dict(PROFILES[profile])
    base.update(items)
    return apply_overrides(RunConfig(), base)


def desk_config(**overrides: str) -> RunConfig:
    items = dict(DESK_PROFILE)
    items.update({k.replace("__", "."): str(v) for k, v in overrides.items()})
    return apply_overrides(RunConfig(), items)
