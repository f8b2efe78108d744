"""Run configuration: one JSON tree covering data, network and schedules."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from ..errors import ConfigError
from ..refnet.model import NetConfig

SEED_ENV = "PEPP_SEED"


@dataclass(frozen=True)
class CameraDistribution:
    """Where the arm base sits in front of a pinhole camera.

    The arm plane faces the camera, tilted by up to ``tilt_deg`` about the
    image axes and rolled in-plane by up to ``roll_deg``.
    """

    width: int = 96
    height: int = 96
    focal: float = 110.0
    depth: tuple[float, float] = (1.2, 1.8)
    tilt_deg: float = 25.0
    roll_deg: float = 30.0
    background: tuple[float, float] = (0.0, 0.15)
    noise_std: float = 0.02
    max_hidden_keypoints: int = 0

    def __post_init__(self):
        object.__setattr__(self, "depth", tuple(float(v) for v in self.depth))
        object.__setattr__(self, "background", tuple(float(v) for v in self.background))
        if self.width < 8 or self.height < 8 or self.focal <= 0:
            raise ConfigError("camera needs a positive focal length and at least 8x8 pixels")
        if not 0 < self.depth[0] <= self.depth[1]:
            raise ConfigError(f"depth range {self.depth} must be positive and ordered")
        if self.max_hidden_keypoints < 0:
            raise ConfigError("max_hidden_keypoints must be non-negative")


@dataclass(frozen=True)
class DataConfig:
    chain: str = "planar3"
    train_count: int = 1000
    test_count: int = 200
    camera: CameraDistribution = field(default_factory=CameraDistribution)
    joint_min_bend: float = 0.3


@dataclass(frozen=True)
class PretrainSchedule:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.04
    masks_per_image: int = 4
    momentum_start: float = 0.996


@dataclass(frozen=True)
class FinetuneSchedule:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    lr_final: float = 1e-5
    weight_decay: float = 0.01
    mask_fraction: float = 0.2
    # one toy epoch advances the curriculum and jitter schedules by this many schedule epochs
    schedule_stretch: float = 4.0
    # jitter magnitudes are quoted for large images; scale them to the crop
    jitter_scale: float = 0.1
    heatmap_sigma: float = 2.0
    use_pretrained: bool = True


@dataclass(frozen=True)
class Sim2RealSchedule:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    lr_scale: dict = field(
        default_factory=lambda: {"keypoint_head": 0.0, "encoder": 1e-2, "predictor": 1e-2, "joint_head": 1.0}
    )


@dataclass(frozen=True)
class EvalOptions:
    filtering: bool = True
    epsilon0: float = 0.5
    epsilon_step: float = 0.025
    min_keypoints: int = 4
    pck_thresholds: tuple[float, ...] = (2.5, 4.0, 5.0, 10.0)
    auc_max: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "pck_thresholds", tuple(float(t) for t in self.pck_thresholds))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    net: NetConfig = field(default_factory=NetConfig)
    pretrain: PretrainSchedule = field(default_factory=PretrainSchedule)
    finetune: FinetuneSchedule = field(default_factory=FinetuneSchedule)
    sim2real: Sim2RealSchedule = field(default_factory=Sim2RealSchedule)
    eval: EvalOptions = field(default_factory=EvalOptions)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "config")

    def with_seed_override(self) -> "RunConfig":
        raw = os.environ.get(SEED_ENV)
        if raw is None or raw == "":
            return self
        try:
            seed = int(raw)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from exc
        return replace_path(self, "seed", seed)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for key, value in d.items():
        current = getattr(defaults, key)
        if is_dataclass(current):
            kwargs[key] = _build(type(current), value, f"{where}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in {where}: {exc}") from exc


def replace_path(cfg: RunConfig, dotted: str, value) -> RunConfig:
    """Copy of ``cfg`` with one nested field replaced, e.g. ``"finetune.epochs"``."""
    d = cfg.to_dict()
    node = d
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node[p]
    if leaf not in node:
        raise ConfigError(f"no setting named {dotted}")
    node[leaf] = value
    return RunConfig.from_dict(d)


def load_config(path=None) -> RunConfig:
    """Read a config file (defaults when ``path`` is None), then apply the seed override."""
    if path is None:
        return RunConfig().with_seed_override()
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(raw).with_seed_override()


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
