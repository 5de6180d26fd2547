"""Run configuration: nested dataclasses with strict JSON round-tripping.

Every field has a default, so ``RunConfig()`` is the desk-scale smoke run.
Unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from soco.errors import ConfigError


@dataclass
class DataConfig:
    n_images: int = 64
    image_size: int = 128
    min_shapes: int = 2
    max_shapes: int = 5
    iou_cap: float = 0.3
    background_contrast: float = 0.06


@dataclass
class SearchConfig:
    k: float = 500.0
    sigma: float = 0.9
    min_size: int = 10


@dataclass
class ProposalConfig:
    K: int = 4
    jitter_prob: float = 0.5
    jitter_range: float = 0.1
    jitter_shared: bool = False


@dataclass
class ViewConfig:
    v1_size: int = 224
    v3_size: int = 112
    use_v3: bool = True
    v4_enabled: bool = False
    v4_size: int = 192
    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    clip_partial: bool = False
    max_crop_retries: int = 10


@dataclass
class AugConfig:
    hflip_prob: float = 0.5
    color_jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    grayscale_prob: float = 0.2
    blur_prob: float = 0.1
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    solarize_prob: float = 0.0
    solarize_threshold: float = 0.5

    @classmethod
    def online(cls) -> "AugConfig":
        return cls()

    @classmethod
    def target(cls) -> "AugConfig":
        return cls(blur_prob=1.0, solarize_prob=0.2)

    @classmethod
    def disabled(cls) -> "AugConfig":
        return cls(hflip_prob=0.0, color_jitter_prob=0.0, grayscale_prob=0.0,
                   blur_prob=0.0, solarize_prob=0.0)


@dataclass
class ModelConfig:
    mode: str = "fpn"  # "fpn" or "c4"
    widths: tuple[int, int, int, int] = (16, 32, 64, 128)
    fpn_dim: int = 32
    fpn_bias: bool = True
    head_dim: int = 256
    roi_size: int = 7
    c4_roi_size: int = 14
    sampling_ratio: int = 2
    proj_hidden: int = 512
    proj_dim: int = 64
    bn_momentum: float = 0.1


@dataclass
class OptimConfig:
    # Desk-scale values: a 200-step run needs larger steps than a long
    # large-batch schedule, and the warmup keeps a tenth of the run.
    base_lr: float = 16.0
    weight_decay: float = 1e-5
    trust_coeff: float = 0.02
    momentum: float = 0.9
    warmup_epochs: float = 2.5
    tau0: float = 0.99


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    checkpoint_every: int = 50
    prefetch: int = 0


@dataclass
class PathsConfig:
    data_dir: str = "data/images"
    proposals: str = "data/proposals.jsonl"
    out_dir: str = "runs/smoke"


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    views: ViewConfig = field(default_factory=ViewConfig)
    aug_online: AugConfig = field(default_factory=AugConfig.online)
    aug_target: AugConfig = field(default_factory=AugConfig.target)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "RunConfig":
        if self.model.mode not in ("fpn", "c4"):
            raise ConfigError(f"model.mode must be 'fpn' or 'c4', got {self.model.mode!r}")
        if self.proposals.K < 1 or self.train.batch_size < 1 or self.train.steps < 1:
            raise ConfigError("proposals.K, train.batch_size and train.steps must be >= 1")
        sizes = [self.views.v1_size]
        if self.views.use_v3:
            sizes.append(self.views.v3_size)
        if self.views.v4_enabled:
            sizes.append(self.views.v4_size)
        for s in sizes:
            if s < 32:
                raise ConfigError(f"view sizes must be at least 32 pixels, got {s}")
        if not 0.0 < self.views.crop_scale[0] <= self.views.crop_scale[1] <= 1.0:
            raise ConfigError("views.crop_scale must satisfy 0 < lo <= hi <= 1")
        if not 0.0 <= self.optim.tau0 <= 1.0:
            raise ConfigError("optim.tau0 must lie in [0, 1]")
        return self


def c4_variant(cfg: RunConfig) -> RunConfig:
    """Switch a config to the C4 layout: no FPN and no V3."""
    cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, mode="c4"),
                              views=dataclasses.replace(cfg.views, use_v3=False))
    return cfg.validate()


def to_dict(cfg: RunConfig) -> dict[str, Any]:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def _convert(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return _build(tp, value, where)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{where}: expected a list of {len(args)} values")
        return tuple(_convert(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    raise ConfigError(f"{where}: unsupported field type {tp}")


def _build(cls, data: dict[str, Any], where: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) in {where or 'root'}: {', '.join(unknown)}")
    base = cls()
    kwargs = {}
    for name in names:
        key = f"{where}.{name}" if where else name
        kwargs[name] = _convert(hints[name], data[name], key) if name in data else getattr(base, name)
    return cls(**kwargs)


def from_dict(data: dict[str, Any]) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)


def loads(text: str) -> RunConfig:
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return from_dict(data)


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        return loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``key.sub=value`` overrides; values parse as JSON, else as bare strings."""
    data = to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = value
    return from_dict(data)
