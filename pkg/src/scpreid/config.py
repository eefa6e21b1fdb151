"""Dataclass configs for the model, losses, data pipeline and training runs.

A run config file (YAML) binds all of these together; unknown keys are
rejected so typos never silently fall back to defaults.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

ALLOWED_STRIPES = (1, 2, 4, 8)

# Channel statistics of the reference pretrained backbone pipeline.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

RUN_ROOT_ENV_VAR = "SCPREID_RUN_ROOT"


class ConfigError(ValueError):
    """Invalid configuration value or malformed run config file."""


@dataclass
class ModelConfig:
    backbone_kind: str = "toy_cnn"  # toy_cnn | resnet50_like
    channels_C: int = 32
    stripes_R: int = 4
    input_height: int = 64
    input_width: int = 32
    dropout_rate: float = 0.75
    num_identities: int = 1
    # Post-processing of the 1x1 channel-expansion layer. "none" keeps the
    # expansion purely linear (the default), which is what the GAP/conv
    # commutation identity relies on.
    expansion_post: str = "none"  # none | bn | relu | bn_relu
    # Which branch the classification + metric losses attach to.
    loss_attachment: str = "global"  # global | local | both

    def __post_init__(self):
        problems = []
        if self.backbone_kind not in ("toy_cnn", "resnet50_like"):
            problems.append(f"backbone_kind={self.backbone_kind!r} not in (toy_cnn, resnet50_like)")
        if self.channels_C < 1:
            problems.append(f"channels_C={self.channels_C} must be >= 1")
        if self.stripes_R not in ALLOWED_STRIPES:
            problems.append(f"stripes_R={self.stripes_R} not in {ALLOWED_STRIPES}")
        if not (0.0 <= self.dropout_rate <= 1.0):
            problems.append(f"dropout_rate={self.dropout_rate} outside [0, 1]")
        if self.num_identities < 1:
            problems.append(f"num_identities={self.num_identities} must be >= 1")
        if self.expansion_post not in ("none", "bn", "relu", "bn_relu"):
            problems.append(f"expansion_post={self.expansion_post!r} unknown")
        if self.loss_attachment not in ("global", "local", "both"):
            problems.append(f"loss_attachment={self.loss_attachment!r} not in (global, local, both)")
        if self.backbone_kind == "resnet50_like" and self.channels_C != 2048:
            problems.append(
                f"channels_C={self.channels_C}: the resnet50_like backbone ends at 2048 channels"
            )
        stride = self.backbone_stride
        if self.input_height % stride or self.input_width % stride:
            problems.append(
                f"input_height/input_width={self.input_height}x{self.input_width} "
                f"not divisible by the backbone stride {stride}"
            )
        else:
            h = self.input_height // stride
            if self.stripes_R in ALLOWED_STRIPES and h % self.stripes_R:
                problems.append(
                    f"stripes_R={self.stripes_R} does not divide the feature-map "
                    f"height {h} (input_height={self.input_height}, stride {stride})"
                )
        if problems:
            raise ConfigError("invalid ModelConfig: " + "; ".join(problems))

    @property
    def backbone_stride(self) -> int:
        return 8 if self.backbone_kind == "toy_cnn" else 32

    @property
    def feature_height(self) -> int:
        return self.input_height // self.backbone_stride

    @property
    def feature_width(self) -> int:
        return self.input_width // self.backbone_stride

    @property
    def global_dim(self) -> int:
        return self.stripes_R * self.channels_C


@dataclass
class LossWeights:
    lambda_scp: float = 10.0
    triplet_margin: float = 0.3
    soft_margin: bool = False  # ln(1+e^x) hinge instead of the hard margin
    scp_reduction: str = "mean"  # mean | sum over the batch
    stop_gradient_local: bool = False  # one-way variant: local branch detached

    def __post_init__(self):
        import math

        if not math.isfinite(self.lambda_scp) or self.lambda_scp < 0:
            raise ConfigError(f"lambda_scp={self.lambda_scp} must be finite and >= 0")
        if self.triplet_margin < 0:
            raise ConfigError(f"triplet_margin={self.triplet_margin} must be >= 0")
        if self.scp_reduction not in ("mean", "sum"):
            raise ConfigError(f"scp_reduction={self.scp_reduction!r} not in (mean, sum)")


@dataclass
class PKBatchSpec:
    P: int = 8  # identities per batch
    K: int = 4  # images per identity

    def __post_init__(self):
        if self.P < 1:
            raise ConfigError(f"P={self.P} must be >= 1")
        if self.K < 2:
            raise ConfigError(f"K={self.K} must be >= 2 (batch-hard mining needs positives)")

    @property
    def batch_size(self) -> int:
        return self.P * self.K


@dataclass
class PreprocessConfig:
    resize_height: int = 72
    resize_width: int = 36
    crop_height: int = 64
    crop_width: int = 32
    flip_prob: float = 0.5
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if self.resize_height < self.crop_height or self.resize_width < self.crop_width:
            raise ConfigError(
                f"resize {self.resize_height}x{self.resize_width} smaller than "
                f"crop {self.crop_height}x{self.crop_width}"
            )
        self.mean = tuple(float(v) for v in self.mean)
        self.std = tuple(float(v) for v in self.std)
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ConfigError("mean/std must have three channel entries")
        if any(s <= 0 for s in self.std):
            raise ConfigError("std entries must be positive")


@dataclass
class SyntheticSpec:
    num_identities: int = 32
    images_per_identity: int = 8
    height: int = 64
    width: int = 32
    num_bands: int = 4  # horizontal body bands, top to bottom
    num_cameras: int = 2
    id_start: int = 0  # first identity label, for disjoint train/test pools
    brightness_jitter: float = 0.15  # per-image scale drawn from 1 +- jitter
    max_shift: int = 2  # horizontal shift in pixels
    noise_sigma: float = 8.0  # gaussian pixel noise on the 0..255 scale

    def __post_init__(self):
        if self.num_identities < 1:
            raise ConfigError(f"num_identities={self.num_identities} must be >= 1")
        if self.images_per_identity < 1:
            raise ConfigError(f"images_per_identity={self.images_per_identity} must be >= 1")
        if self.height % self.num_bands:
            raise ConfigError(
                f"height={self.height} not divisible by num_bands={self.num_bands}"
            )
        if self.num_cameras < 1:
            raise ConfigError(f"num_cameras={self.num_cameras} must be >= 1")
        if not (0.0 <= self.brightness_jitter < 1.0):
            raise ConfigError(f"brightness_jitter={self.brightness_jitter} outside [0, 1)")


@dataclass
class TrainConfig:
    epochs: int = 30
    steps_per_epoch: int = 0  # 0: derived as len(dataset) // (P*K), at least 1
    lr_initial: float = 1e-3
    lr_milestones: list[tuple[int, float]] = field(default_factory=lambda: [(8, 1e-4), (18, 1e-5)])
    weight_decay: float = 1e-5
    decoupled_weight_decay: bool = False  # False: classic L2-in-gradient coupling
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch: PKBatchSpec = field(default_factory=PKBatchSpec)
    seed: int = 0
    checkpoint_every: int = 10  # epochs between checkpoints (0: only final)
    deterministic: bool = True  # single-threaded torch, reproducible trajectories

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs={self.epochs} must be >= 1")
        if self.lr_initial <= 0:
            raise ConfigError(f"lr_initial={self.lr_initial} must be positive")
        self.lr_milestones = [(int(e), float(lr)) for e, lr in self.lr_milestones]
        epochs_seen = [e for e, _ in self.lr_milestones]
        if epochs_seen != sorted(epochs_seen) or len(set(epochs_seen)) != len(epochs_seen):
            raise ConfigError(f"lr_milestones epochs {epochs_seen} must be strictly increasing")
        if any(lr <= 0 for _, lr in self.lr_milestones):
            raise ConfigError("all milestone learning rates must be positive")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay={self.weight_decay} must be >= 0")


@dataclass
class EvalConfig:
    mode: str = "full"  # full | prefix_by_visibility
    exclusion: str = "none"  # none | same_id_same_cam
    topk: tuple[int, ...] = (1, 5, 10)

    def __post_init__(self):
        if self.mode not in ("full", "prefix_by_visibility"):
            raise ConfigError(f"mode={self.mode!r} not in (full, prefix_by_visibility)")
        if self.exclusion not in ("none", "same_id_same_cam"):
            raise ConfigError(f"exclusion={self.exclusion!r} not in (none, same_id_same_cam)")
        self.topk = tuple(int(k) for k in self.topk)


@dataclass
class DataConfig:
    train_dir: str = ""
    query_dir: str = ""
    gallery_dir: str = ""
    normalization: str = "compute"  # compute | imagenet | explicit
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    resize: tuple[int, int] = (72, 36)
    crop: tuple[int, int] = (64, 32)
    # How partial probes are fed to the fixed-size network: "rescale"
    # stretches the visible crop to full size, "pad" keeps it in place and
    # fills the hidden rows (preserving row-to-body correspondence).
    partial_input: str = "rescale"

    def __post_init__(self):
        if self.normalization not in ("compute", "imagenet", "explicit"):
            raise ConfigError(f"normalization={self.normalization!r} unknown")
        if self.partial_input not in ("rescale", "pad"):
            raise ConfigError(f"partial_input={self.partial_input!r} not in (rescale, pad)")
        self.mean = tuple(float(v) for v in self.mean)
        self.std = tuple(float(v) for v in self.std)
        self.resize = tuple(int(v) for v in self.resize)
        self.crop = tuple(int(v) for v in self.crop)

    def preprocess_config(self, mean=None, std=None) -> PreprocessConfig:
        if self.normalization == "imagenet":
            mean, std = IMAGENET_MEAN, IMAGENET_STD
        elif self.normalization == "explicit":
            mean, std = self.mean, self.std
        elif mean is None or std is None:
            raise ConfigError("normalization=compute needs dataset statistics")
        return PreprocessConfig(
            resize_height=self.resize[0],
            resize_width=self.resize[1],
            crop_height=self.crop[0],
            crop_width=self.crop[1],
            mean=tuple(mean),
            std=tuple(std),
        )


@dataclass
class RunConfig:
    """Everything one training/eval run needs, loadable from a YAML file."""

    run_name: str = "run"
    output_root: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def run_dir(self) -> Path:
        root = os.environ.get(RUN_ROOT_ENV_VAR, self.output_root)
        return Path(root) / self.run_name


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return cls(**raw)


_SECTIONS = {
    "model": ModelConfig,
    "loss": LossWeights,
    "train": TrainConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}
_SCALARS = ("run_name", "output_root")


def run_config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a mapping at top level")
    unknown = sorted(set(raw) - set(_SECTIONS) - set(_SCALARS))
    if unknown:
        raise ConfigError(f"run config: unknown top-level keys {unknown}")
    kwargs: dict[str, Any] = {k: raw[k] for k in _SCALARS if k in raw}
    for section, cls in _SECTIONS.items():
        if section in raw:
            sub = dict(raw[section]) if isinstance(raw[section], dict) else raw[section]
            if section == "train" and isinstance(sub, dict) and "batch" in sub:
                sub["batch"] = _build(PKBatchSpec, sub["batch"], "train.batch")
            kwargs[section] = _build(cls, sub, section)
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:  # bad scalar types
        raise ConfigError(f"run config: {exc}") from exc


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"run config file not found: {path}")
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if raw is None:
        raise ConfigError(f"{path}: empty config file")
    return run_config_from_dict(raw)


def _plain(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def run_config_to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg)


def save_run_config(cfg: RunConfig, path: str | Path) -> None:
    """Write the fully resolved config next to a run's outputs."""
    with open(path, "w") as fh:
        yaml.safe_dump(run_config_to_dict(cfg), fh, sort_keys=True)
