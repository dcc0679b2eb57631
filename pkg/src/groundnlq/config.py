"""Configuration records shared by every stage of the pipeline.

All configs are plain dataclasses so they serialize to JSON manifests with
``dataclasses.asdict`` and can be rebuilt with ``from_dict``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    """Raised when a configuration violates its invariants."""


def _from_dict(cls, data: dict[str, Any]):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    return cls(**data)


@dataclass
class JitterConfig:
    center_sigma_frac: float = 0.25
    width_scale_min: float = 0.75
    width_scale_max: float = 1.25
    seed: int = 0

    def __post_init__(self):
        if self.center_sigma_frac < 0:
            raise ConfigError("center_sigma_frac must be >= 0")
        if not 0 < self.width_scale_min <= self.width_scale_max:
            raise ConfigError("need 0 < width_scale_min <= width_scale_max")

    @classmethod
    def identity(cls, seed: int = 0) -> "JitterConfig":
        return cls(center_sigma_frac=0.0, width_scale_min=1.0, width_scale_max=1.0, seed=seed)

    from_dict = classmethod(_from_dict)


@dataclass
class SyntheticConfig:
    """Planted-signal dataset parameters.

    ``world_seed`` fixes the signature-to-video embedding so that datasets
    generated with different ``seed`` values (e.g. pretrain vs. finetune
    splits) share the same underlying grounding problem.
    """

    num_videos: int = 16
    T_range: tuple[int, int] = (96, 160)
    D: int = 32
    D_t: int = 16
    L_range: tuple[int, int] = (4, 12)
    queries_per_video: int = 1
    signal_gain: float = 2.0
    noise_sigma: float = 1.0
    seed: int = 0
    world_seed: int = 0
    split: str = "train"
    snippet_duration_sec: float = 0.53
    min_width: int = 2
    max_width_frac: float = 0.5

    def __post_init__(self):
        self.T_range = tuple(self.T_range)
        self.L_range = tuple(self.L_range)
        if self.num_videos < 1 or self.queries_per_video < 1:
            raise ConfigError("num_videos and queries_per_video must be >= 1")
        for name in ("T_range", "L_range"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ConfigError(f"{name} must satisfy 1 <= lo <= hi, got {(lo, hi)}")
        if self.D < 1 or self.D_t < 1:
            raise ConfigError("D and D_t must be >= 1")
        # gain 0 is allowed: it is the null model used by independence checks
        if self.signal_gain < 0 or self.noise_sigma <= 0:
            raise ConfigError("signal_gain must be >= 0 and noise_sigma > 0")
        if self.snippet_duration_sec <= 0:
            raise ConfigError("snippet_duration_sec must be > 0")
        if self.min_width < 1 or self.min_width > self.T_range[0]:
            raise ConfigError("min_width must lie in [1, T_range[0]]")
        if not 0 < self.max_width_frac <= 1:
            raise ConfigError("max_width_frac must lie in (0, 1]")

    from_dict = classmethod(_from_dict)


@dataclass
class ModelConfig:
    D_video_in: int = 32
    D_text_in: int = 16
    d_model: int = 256
    n_heads: int = 4
    window: int = 9
    n_text_blocks: int = 4
    n_video_blocks: int = 4
    n_pyramid_blocks: int = 6
    ffn_expansion: int = 4
    dropout: float = 0.0
    variant: str = "base"
    cls_prior_prob: float = 0.01

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for sinusoidal positions")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"window must be odd and >= 1, got {self.window}")
        if self.variant not in ("base", "star"):
            raise ConfigError(f"variant must be 'base' or 'star', got {self.variant!r}")
        if min(self.D_video_in, self.D_text_in, self.ffn_expansion) < 1:
            raise ConfigError("input widths and ffn_expansion must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not 0.0 < self.cls_prior_prob < 1.0:
            raise ConfigError("cls_prior_prob must lie in (0, 1)")

    @property
    def n_levels(self) -> int:
        return self.n_pyramid_blocks + 1

    from_dict = classmethod(_from_dict)


DEFAULT_REGRESSION_RANGES = (
    (0.0, 4.0), (4.0, 8.0), (8.0, 16.0), (16.0, 32.0),
    (32.0, 64.0), (64.0, 128.0), (128.0, math.inf),
)


@dataclass
class AssignmentConfig:
    """Label assignment and loss weights.

    Regression ranges are half-open ``(lo, hi]`` intervals in snippet units,
    one per pyramid level.
    """

    regression_ranges: tuple[tuple[float, float], ...] = DEFAULT_REGRESSION_RANGES
    center_sampling_radius: float = 1.5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    reg_loss_weight: float = 1.0
    cls_loss: str = "focal"
    reg_loss: str = "diou"

    def __post_init__(self):
        self.regression_ranges = tuple(
            (float(lo), math.inf if hi is None else float(hi)) for lo, hi in self.regression_ranges
        )
        rr = self.regression_ranges
        if rr[0][0] != 0.0 or rr[-1][1] != math.inf:
            raise ConfigError("regression_ranges must cover (0, inf)")
        for (lo, hi), (nlo, _) in zip(rr, rr[1:] + ((math.inf, None),)):
            if not lo < hi:
                raise ConfigError(f"empty regression range {(lo, hi)}")
            if nlo != math.inf and nlo != hi:
                raise ConfigError("regression_ranges must be contiguous")
        if self.center_sampling_radius <= 0:
            raise ConfigError("center_sampling_radius must be > 0")
        if self.reg_loss_weight < 0:
            raise ConfigError("reg_loss_weight must be >= 0")
        if self.cls_loss not in ("focal", "bce") or self.reg_loss not in ("diou", "iou"):
            raise ConfigError("cls_loss in {focal, bce}; reg_loss in {diou, iou}")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        # JSON has no infinity; the open top range is written as null
        d["regression_ranges"] = [[lo, None if math.isinf(hi) else hi] for lo, hi in self.regression_ranges]
        return d

    from_dict = classmethod(_from_dict)


@dataclass
class DecodeConfig:
    score_threshold: float = 1e-3
    pre_nms_topk: int = 2000
    nms: str = "soft_gaussian"
    soft_sigma: float = 0.9
    hard_iou: float = 0.5
    keep_topk: int = 5

    def __post_init__(self):
        if not 0 < self.score_threshold < 1 or not 0 < self.hard_iou < 1:
            raise ConfigError("score_threshold and hard_iou must lie in (0, 1)")
        if self.pre_nms_topk < 1 or self.keep_topk < 1:
            raise ConfigError("topk values must be >= 1")
        if self.nms not in ("soft_gaussian", "hard"):
            raise ConfigError(f"nms must be 'soft_gaussian' or 'hard', got {self.nms!r}")
        if self.soft_sigma <= 0:
            raise ConfigError("soft_sigma must be > 0")

    from_dict = classmethod(_from_dict)


# Full-scale runs: 4 GPUs x 4 (pretrain, effective 16) and 2 GPUs x 2
# (finetune, effective 4); desk runs default to 8.
_STAGE_MAX_LR = {"pretrain": 2e-4, "finetune": 1e-4}


@dataclass
class TrainConfig:
    stage: str = "finetune"
    total_epochs: int = 10
    warmup_epochs: int = 4
    max_lr: float | None = None
    batch_size: int = 8
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    seed: int = 0
    init_checkpoint: str | None = None
    reinit_heads: bool = False
    train_split: str | None = None
    eval_split: str | None = "val"
    select_metric: str = "R1@0.3"

    def __post_init__(self):
        if self.stage not in _STAGE_MAX_LR:
            raise ConfigError(f"stage must be 'pretrain' or 'finetune', got {self.stage!r}")
        if self.max_lr is None:
            self.max_lr = _STAGE_MAX_LR[self.stage]
        if self.stage == "finetune":
            self.reinit_heads = True
        if self.train_split is None:
            self.train_split = "pretrain" if self.stage == "pretrain" else "train"
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError("need 0 <= warmup_epochs < total_epochs")
        if self.max_lr <= 0:
            raise ConfigError("max_lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.grad_clip <= 0 or self.weight_decay < 0:
            raise ConfigError("grad_clip must be > 0 and weight_decay >= 0")

    from_dict = classmethod(_from_dict)


def config_to_dict(cfg) -> dict[str, Any]:
    if hasattr(cfg, "to_dict"):
        return cfg.to_dict()
    return dataclasses.asdict(cfg)


@dataclass
class RunConfig:
    """Bundle of every config a CLI run resolves, as written to manifests."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    assign: AssignmentConfig = field(default_factory=AssignmentConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    jitter: JitterConfig = field(default_factory=JitterConfig)
    synth: SyntheticConfig = field(default_factory=SyntheticConfig)

    SECTIONS = ("model", "train", "assign", "decode", "jitter", "synth")
    _TYPES = {
        "model": ModelConfig, "train": TrainConfig, "assign": AssignmentConfig,
        "decode": DecodeConfig, "jitter": JitterConfig, "synth": SyntheticConfig,
    }

    def to_dict(self) -> dict[str, Any]:
        return {name: config_to_dict(getattr(self, name)) for name in self.SECTIONS}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        unknown = set(data) - set(cls.SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        return cls(**{k: cls._TYPES[k].from_dict(v) for k, v in data.items()})
