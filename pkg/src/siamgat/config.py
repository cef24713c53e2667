"""Run configuration: nested dataclasses <-> YAML, with dotted-key overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    backbone: str = "toybone"
    channels: int = 32                  # backbone output channels
    backbone_widths: list = field(default_factory=lambda: [16, 32, 32])
    transformed_channels: int = 32      # width of ws / wt / wv outputs
    embedding: str = "gam"              # gam | dw_xcorr
    selection: str = "target_aware"     # target_aware | prefixed_crop
    prefix_size: int = 7                # side of the pre-fixed template crop (cells)
    selection_impl: str = "zero_mask"   # crop | zero_mask
    masking: str = "exclude"            # exclude | include_zeros
    gam_batchnorm: bool = True
    value_bias: bool = True
    head_hidden: int = 64
    head_depth: int = 2
    centerness: bool = True
    reg_scale: float = 8.0
    cls_loss: str = "ce"                # ce | focal
    lambda_cen: float = 1.0
    lambda_reg: float = 3.0
    template_size: int = 127
    search_size: int = 287
    context_amount: float = 0.5


@dataclass
class TrainConfig:
    epochs: int = 20
    steps_per_epoch: int = 50
    batch_size: int = 8
    warmup_epochs: int = 5
    decay_epochs: int = 15
    lr_start: float = 0.005
    lr_peak: float = 0.01
    lr_end: float = 0.0005
    freeze_backbone_epochs: int = 10
    partial_freeze: list = field(default_factory=lambda: ["stage1", "stage2"])
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 10.0
    calibration_batches: int = 4
    max_gap: int = 20
    shift_jitter: float = 0.25          # max crop-centre shift as a fraction of the target size
    scale_jitter: float = 0.45          # max relative change of the search crop side
    checkpoint_every: int = 1           # epochs


@dataclass
class TrackConfig:
    window_influence: float = 0.3
    penalty_k: float = 0.04
    lr: float = 0.3
    min_size: float = 4.0


@dataclass
class PathsConfig:
    data: str = ""
    checkpoint_dir: str = "runs/checkpoints"
    log: str = "runs/metrics.log"
    results: str = "runs/results"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    track: TrackConfig = field(default_factory=TrackConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0

    def validate(self) -> "RunConfig":
        m, t = self.model, self.train
        _choice("model.embedding", m.embedding, ("gam", "dw_xcorr"))
        _choice("model.selection", m.selection, ("target_aware", "prefixed_crop"))
        _choice("model.selection_impl", m.selection_impl, ("crop", "zero_mask"))
        _choice("model.masking", m.masking, ("exclude", "include_zeros"))
        _choice("model.backbone", m.backbone, ("toybone",))
        _choice("model.cls_loss", m.cls_loss, ("ce", "focal"))
        if m.embedding == "dw_xcorr" and m.selection != "prefixed_crop":
            raise ConfigError("dw_xcorr needs selection = prefixed_crop (fixed kernel size)")
        if t.warmup_epochs + t.decay_epochs != t.epochs:
            raise ConfigError("train.warmup_epochs + train.decay_epochs must equal train.epochs")
        if min(t.lr_start, t.lr_peak, t.lr_end) <= 0:
            raise ConfigError("learning rates must be positive")
        if t.batch_size < 1 or t.steps_per_epoch < 1:
            raise ConfigError("batch_size and steps_per_epoch must be positive")
        if not 0 <= self.track.lr <= 1:
            raise ConfigError("track.lr must lie in [0, 1]")
        return self


def _choice(key, value, allowed):
    if value not in allowed:
        raise ConfigError(f"{key} must be one of {allowed}, got {value!r}")


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where or 'root'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key(s) in {where or 'root'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}{name}.")
        else:
            kwargs[name] = _coerce(value, default, f"{where}{name}")
    return cls(**kwargs)


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, (int, float, str, list)) and not isinstance(value, type(default)):
        raise ConfigError(f"{key} must be of type {type(default).__name__}, got {value!r}")
    return value


def from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {}, "").validate()


def to_dict(cfg: RunConfig) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return from_dict(data)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    data = to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return from_dict(data)
