from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from ..data.masking import MASK_ONLY
from ..data.packing import MASK_MODES
from ..model.config import ConfigError

BASE_ONLY = (1.0, 0.0, 0.0)
LONG_MIXTURE = (0.2, 0.4, 0.4)


@dataclass(frozen=True)
class Stage:
    max_len: int
    steps: int
    mixture: tuple = BASE_ONLY

    def __post_init__(self) -> None:
        object.__setattr__(self, "mixture", tuple(float(p) for p in self.mixture))
        if self.max_len < 1 or self.steps < 0:
            raise ConfigError(f"bad stage {self}")
        if len(self.mixture) != 3 or min(self.mixture) < 0 or abs(sum(self.mixture) - 1.0) > 1e-9:
            raise ConfigError(f"stage mixture must be three probabilities summing to 1, got {self.mixture}")


@dataclass(frozen=True)
class TrainPlan:
    """Optimizer, schedule, corruption and curriculum settings for MLM pretraining."""

    peak_lr: float = 6e-4
    warmup_steps: int = 2000
    decay_fraction: float = 0.9
    floor_fraction: float = 0.1
    schedule: str = "cosine"  # or "linear"
    optimizer: str = "adamw"  # or "adam"
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    batch_tokens: int = 2 * 1024 * 1024
    mask_rate: float = 0.2
    mask_scheme: tuple = MASK_ONLY
    mask_mode: str = "padded"
    long_thresholds: tuple = (1024, 2048)
    schedule_steps: int = 0  # 0: steps of the first stage
    cycle: bool = True
    seed: int = 0
    stages: tuple = (Stage(1024, 1_000_000), Stage(4096, 50_000, LONG_MIXTURE))

    def __post_init__(self) -> None:
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "mask_scheme", tuple(float(b) for b in self.mask_scheme))
        object.__setattr__(self, "long_thresholds", tuple(int(b) for b in self.long_thresholds))
        object.__setattr__(self, "stages", tuple(self.stages))
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.floor_fraction <= 1.0:
            raise ConfigError("floor_fraction must lie in (0, 1]")
        if not 0.0 < self.decay_fraction <= 1.0:
            raise ConfigError("decay_fraction must lie in (0, 1]")
        if self.schedule not in ("cosine", "linear"):
            raise ConfigError(f"schedule must be cosine or linear, got {self.schedule!r}")
        if self.optimizer not in ("adamw", "adam"):
            raise ConfigError(f"optimizer must be adamw or adam, got {self.optimizer!r}")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ConfigError("mask_rate must lie in [0, 1]")
        if self.clip_norm <= 0 or self.batch_tokens < 1:
            raise ConfigError("clip_norm and batch_tokens must be positive")
        if not self.stages:
            raise ConfigError("a plan needs at least one stage")
        if self.warmup_steps >= max(self.total_schedule_steps, 1) and self.total_schedule_steps > 0:
            raise ConfigError(
                f"warmup_steps={self.warmup_steps} must be smaller than the schedule length {self.total_schedule_steps}"
            )

    @property
    def total_schedule_steps(self) -> int:
        """Steps the warmup/decay schedule spans; later steps run at the floor."""
        return self.schedule_steps or self.stages[0].steps

    @property
    def total_steps(self) -> int:
        return sum(s.steps for s in self.stages)

    def rows_for(self, stage: Stage) -> int:
        # capacity accounting: padded positions count toward batch_tokens
        return max(1, self.batch_tokens // stage.max_len)

    def replace(self, **changes) -> "TrainPlan":
        return dataclasses.replace(self, **changes)


def neobert_plan(**overrides) -> TrainPlan:
    """1M steps at 1,024 tokens then 50k at 4,096 with the 20/40/40 length mixture, 2M-token batches."""
    return TrainPlan(**overrides)


def toy_plan(**overrides) -> TrainPlan:
    base = dict(
        peak_lr=2e-3,
        warmup_steps=20,
        batch_tokens=1024,
        long_thresholds=(64, 128),
        stages=(Stage(64, 200), Stage(256, 50, LONG_MIXTURE)),
    )
    base.update(overrides)
    return TrainPlan(**base)
