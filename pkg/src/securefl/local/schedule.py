"""Per-group one-cycle learning-rate schedule with a momentum ramp."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

from ..errors import EpochOutOfRange
from ..params import Group


class LocalMode(str, enum.Enum):
    FEDAVG_LOCAL = "fedavg"
    FEDOPT_LOCAL = "fedopt"

    @classmethod
    def parse(cls, value) -> "LocalMode":
        if isinstance(value, cls):
            return value
        v = str(value).lower()
        for m in cls:
            if v in (m.value, m.name.lower()):
                return m
        raise ValueError(f"unknown local training mode {value!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs_per_round: int = 5
    batch_size: int = 32
    rounds: int = 30
    warmup_epochs: int = 30
    lr_bias_init: float = 0.1
    lr_other_init: float = 0.0
    lr_peak: float = 0.01
    lr_final: float = 0.001
    lr_fixed: float = 0.01
    momentum_init: float = 0.8
    momentum_final: float = 0.937
    weight_decay: float = 0.0005
    mode: LocalMode = LocalMode.FEDOPT_LOCAL

    def __post_init__(self):
        object.__setattr__(self, "mode", LocalMode.parse(self.mode))
        for name in ("epochs_per_round", "batch_size", "rounds"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError(
                f"warmup_epochs must lie in [0, {self.total_epochs}], got {self.warmup_epochs}"
            )
        for name in ("lr_bias_init", "lr_peak", "lr_final", "lr_fixed"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_other_init < 0:
            raise ValueError("lr_other_init must be >= 0")
        for name in ("momentum_init", "momentum_final"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    @property
    def total_epochs(self) -> int:
        return self.rounds * self.epochs_per_round


def initial_lr(cfg: TrainConfig, group: Group) -> float:
    return cfg.lr_bias_init if group is Group.BIAS else cfg.lr_other_init


def schedule_at(cfg: TrainConfig, global_epoch: int) -> tuple[dict[Group, float], float]:
    """Learning rate per group and momentum at ``global_epoch``.

    Linear warm-up from each group's initial rate (and from ``momentum_init``)
    to the peak, then cosine decay from ``lr_peak`` to ``lr_final`` over the
    remaining epochs with momentum held at ``momentum_final``.
    """
    total = cfg.total_epochs
    if not 0 <= global_epoch <= total:
        raise EpochOutOfRange(f"epoch {global_epoch} outside [0, {total}]")
    warm = cfg.warmup_epochs
    if global_epoch < warm:
        frac = global_epoch / warm
        lrs = {g: initial_lr(cfg, g) + (cfg.lr_peak - initial_lr(cfg, g)) * frac for g in Group}
        momentum = cfg.momentum_init + (cfg.momentum_final - cfg.momentum_init) * frac
        return lrs, momentum
    span = total - warm
    progress = (global_epoch - warm) / span if span else 0.0
    lr = cfg.lr_final + (cfg.lr_peak - cfg.lr_final) * (1.0 + math.cos(math.pi * progress)) / 2.0
    return {g: lr for g in Group}, cfg.momentum_final


@dataclass(frozen=True)
class ScheduleState:
    global_epoch: int = 0
    lrs: tuple[float, float, float] | None = None
    momentum: float | None = None

    @classmethod
    def at(cls, cfg: TrainConfig, global_epoch: int) -> "ScheduleState":
        lrs, momentum = schedule_at(cfg, global_epoch)
        return cls(global_epoch, tuple(lrs[g] for g in Group), momentum)

    def advance(self, cfg: TrainConfig, epochs: int = 1) -> "ScheduleState":
        return ScheduleState.at(cfg, self.global_epoch + epochs)


def fixed_schedule(cfg: TrainConfig) -> tuple[dict[Group, float], float]:
    return {g: cfg.lr_fixed for g in Group}, 0.0

