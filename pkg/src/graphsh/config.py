"""Network and training configuration plus the config-file loader.

Config file (YAML or JSON), every key optional::

    network:
      architecture: graphsh      # graphsh | seqres
      stacks: 4
      channels: 64
      conv_kind: preaggr         # vanilla | semantic | preaggr
      se_ratio: 8
      dropout_p: 0.25
      blocks_per_scale: 1
      hourglass_channels: null   # [C, C_mid, C_low]; default [C, 3C/2, 2C]
      widen: pre_pool            # pre_pool | post_pool
      pooling: true              # false: every hourglass level stays at 16 joints
      multi_level: se            # se | concat | none
      pre_bn_relu: false
      seqres_depth: 4
      seqres_channels: 128
    train:
      learning_rate: 1.0e-4
      decay_factor: 0.92
      decay_every: 20000
      batch_size: 256
      max_iterations: 2000       # required before training
      seed: 0
      eval_every: 500
    skeleton: path/to/skeleton.yaml   # optional, relative to the config file
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .layers import CONV_KINDS


@dataclass(frozen=True)
class NetworkConfig:
    architecture: str = "graphsh"
    stacks: int = 4
    channels: int = 64
    conv_kind: str = "preaggr"
    se_ratio: int = 8
    dropout_p: float = 0.25
    blocks_per_scale: int = 1
    hourglass_channels: tuple[int, int, int] | None = None
    widen: str = "pre_pool"
    pooling: bool = True
    multi_level: str = "se"
    pre_bn_relu: bool = False
    seqres_depth: int = 4
    seqres_channels: int = 128

    def __post_init__(self):
        if self.hourglass_channels is not None:
            object.__setattr__(self, "hourglass_channels", tuple(int(c) for c in self.hourglass_channels))
        self.validate()

    @property
    def ladder(self) -> tuple[int, int, int]:
        if self.hourglass_channels is not None:
            return self.hourglass_channels
        C = self.channels
        return (C, C * 3 // 2, C * 2)

    def validate(self) -> None:
        if self.architecture not in ("graphsh", "seqres"):
            raise ConfigError(f"architecture must be graphsh or seqres, got {self.architecture!r}")
        if self.conv_kind not in CONV_KINDS:
            raise ConfigError(f"conv_kind must be one of {CONV_KINDS}, got {self.conv_kind!r}")
        for name in ("stacks", "channels", "se_ratio", "blocks_per_scale", "seqres_depth", "seqres_channels"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.widen not in ("pre_pool", "post_pool"):
            raise ConfigError(f"widen must be pre_pool or post_pool, got {self.widen!r}")
        if self.multi_level not in ("se", "concat", "none"):
            raise ConfigError(f"multi_level must be se, concat or none, got {self.multi_level!r}")
        if self.architecture == "graphsh":
            if self.channels % self.stacks:
                raise ConfigError(f"channels ({self.channels}) must be divisible by stacks ({self.stacks})")
            if self.multi_level == "se" and self.channels % self.se_ratio:
                raise ConfigError(f"channels ({self.channels}) must be divisible by se_ratio ({self.se_ratio})")
            ladder = self.ladder
            if len(ladder) != 3 or min(ladder) < 1 or ladder[0] != self.channels:
                raise ConfigError(f"hourglass_channels must be 3 positive widths starting at {self.channels}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    decay_factor: float = 0.92
    decay_every: int = 20000
    batch_size: int = 256
    max_iterations: int | None = None
    seed: int = 0
    eval_every: int = 500

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        for name in ("decay_every", "batch_size", "eval_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be positive, got {self.max_iterations}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    skeleton_path: Path | None = None


def _build(cls, raw: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown {section} keys: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad {section} section: {exc}") from None


def network_config_from_dict(raw: dict[str, Any]) -> NetworkConfig:
    return _build(NetworkConfig, raw, "network")


def train_config_from_dict(raw: dict[str, Any]) -> TrainConfig:
    return _build(TrainConfig, raw, "train")


def load_config(path: str | Path | None, overrides: dict[str, dict[str, Any]] | None = None) -> RunConfig:
    """Read a config file and apply ``overrides`` (flag > file > default)."""
    raw: dict[str, Any] = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError("config file must be a mapping")
        raw = loaded or {}
    unknown = sorted(set(raw) - {"network", "train", "skeleton"})
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {', '.join(unknown)}")
    overrides = overrides or {}
    net = dict(raw.get("network") or {})
    net.update({k: v for k, v in overrides.get("network", {}).items() if v is not None})
    tr = dict(raw.get("train") or {})
    tr.update({k: v for k, v in overrides.get("train", {}).items() if v is not None})
    skel = raw.get("skeleton")
    skel_path = None
    if skel is not None:
        skel_path = Path(skel)
        if path is not None and not skel_path.is_absolute():
            skel_path = Path(path).parent / skel_path
    return RunConfig(network_config_from_dict(net), train_config_from_dict(tr), skel_path)


def network_config_to_dict(cfg: NetworkConfig) -> dict[str, Any]:
    d = dataclasses.asdict(cfg)
    if d["hourglass_channels"] is not None:
        d["hourglass_channels"] = list(d["hourglass_channels"])
    return d
