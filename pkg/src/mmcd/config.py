"""Flat run configuration shared by every CLI subcommand.

Values come from the dataclass defaults, then an optional JSON file, then
command-line flags; later sources win. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Optional

from .synthgen import SynthConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # shared
    seed: int = 0
    out_dir: str = "."
    # synthesis
    size: Optional[int] = None
    height: int = 128
    width: int = 128
    num_classes: int = 5
    channels_x: int = 3
    channels_y: int = 5
    change_fraction: float = 0.1
    noise_std_x: float = 0.05
    noise_std_y: float = 0.15
    smoothness: float = 6.0
    speckle_looks: int = 0
    # training
    epochs: int = 100
    batches_per_epoch: int = 10
    batch_size: int = 10
    patch_size: int = 100
    affinity_crop: int = 20
    lr_base: float = 1e-4
    lr_decay_main: float = 0.96
    lr_decay_code: float = 0.9
    lr_decay_every: int = 1
    prior_update_epochs: tuple = (25, 50, 75)
    lambda_r: float = 1.0
    lambda_c: float = 1.0
    lambda_t: float = 1.0
    lambda_z: float = 1.0
    hidden_channels: int = 100
    dropout: float = 0.2
    amsgrad: bool = False
    tile: int = 256
    tile_overlap: int = 16
    # detection / evaluation
    filter_sigma: float = 2.0
    bins: int = 256
    root: bool = False
    w_x: Optional[float] = None
    w_y: Optional[float] = None
    kappa_standard: bool = False
    # preprocessing
    log: bool = False
    epsilon: float = 1e-6
    normalize: bool = True
    # file paths
    x: Optional[str] = None
    y: Optional[str] = None
    gt: Optional[str] = None
    checkpoint: Optional[str] = None
    map: Optional[str] = None
    input: Optional[str] = None
    output: Optional[str] = None

    def synth_config(self) -> SynthConfig:
        h = w = self.size if self.size is not None else None
        return SynthConfig(
            seed=self.seed, height=h or self.height, width=w or self.width, num_classes=self.num_classes,
            channels_x=self.channels_x, channels_y=self.channels_y, change_fraction=self.change_fraction,
            noise_std_x=self.noise_std_x, noise_std_y=self.noise_std_y, smoothness=self.smoothness,
            speckle_looks=self.speckle_looks)

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: getattr(self, k) for k in names})


_FIELD_TYPES = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value: Any) -> Any:
    default = _FIELD_TYPES[name].default
    if value is None:
        return None
    if name == "prior_update_epochs":
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        return tuple(int(v) for v in value)
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{name}: cannot read {value!r} as a boolean")
        return bool(value)
    if isinstance(default, int) or name in ("size",):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{name}: expected an integer, got {value}")
        return int(value)
    if isinstance(default, float) or name in ("w_x", "w_y"):
        return float(value)
    return str(value)


def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def resolve(file_values: Optional[dict] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults <- file values <- overrides, rejecting unknown keys."""
    merged: dict[str, Any] = {}
    for source in (file_values or {}, overrides or {}):
        unknown = sorted(set(source) - set(_FIELD_TYPES))
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        for k, v in source.items():
            merged[k] = _coerce(k, v)
    return dataclasses.replace(RunConfig(), **merged)


def to_json_dict(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["prior_update_epochs"] = list(cfg.prior_update_epochs)
    return d
