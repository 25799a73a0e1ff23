"""SGD with momentum and coupled L2 weight decay, plus epoch-level LR schedules."""

from __future__ import annotations

import math
from decimal import Decimal
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ConfigError, ParameterError, ShapeError
from .layers import Param


@dataclass
class LrSchedule:
    kind: str = "step"
    base_lr: float = 0.1
    milestones: tuple[int, ...] = (60, 120, 160)
    factor: float = 0.2
    lr_min: float = 0.0
    total_epochs: int = 200

    def __post_init__(self):
        if self.kind not in ("step", "cosine"):
            raise ConfigError(f"unknown LR schedule {self.kind!r}")
        self.milestones = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must be strictly increasing: {self.milestones}")
        if self.kind == "step" and not 0.0 < self.factor < 1.0:
            raise ConfigError(f"step factor must be in (0, 1), got {self.factor}")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")

    def __call__(self, epoch: int) -> float:
        if self.kind == "step":
            return step_lr(self, epoch)
        return cosine_lr(self, epoch, self.total_epochs)


CIFAR_RECIPE = LrSchedule("step", 0.1, (60, 120, 160), 0.2, total_epochs=200)
IMAGENET_SUBSET_RECIPE = LrSchedule("step", 0.1, (30, 60, 85, 95, 105), 0.1, total_epochs=110)


def step_lr(sched: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ParameterError("epoch must be nonnegative")
    drops = sum(1 for m in sched.milestones if m <= epoch)
    # decimal arithmetic so 0.1 * 0.2**k lands on the nearest double to the decimal value
    return float(Decimal(repr(sched.base_lr)) * Decimal(repr(sched.factor)) ** drops)


def cosine_lr(sched: LrSchedule, epoch: int, total_epochs: int) -> float:
    if total_epochs <= 0:
        raise ParameterError("total_epochs must be positive")
    if not 0 <= epoch <= total_epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {total_epochs}]")
    if epoch == total_epochs:
        return sched.lr_min
    if 2 * epoch == total_epochs:
        return 0.5 * (sched.base_lr + sched.lr_min)
    return sched.lr_min + 0.5 * (sched.base_lr - sched.lr_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))


@dataclass
class SgdState:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ParameterError("lr must be positive")


def sgd_step(params: Iterable[Param], state: SgdState) -> None:
    """In-place update: v <- momentum*v + grad + wd*param; param <- param - lr*v.

    Parameters flagged ``decay=False`` (BN gamma/beta) skip the decay term.
    """
    for i, p in enumerate(params):
        if p.grad.shape != p.value.shape:
            raise ShapeError(f"gradient shape {p.grad.shape} != parameter shape {p.value.shape}")
        v = state.velocity.get(i)
        if v is None:
            v = state.velocity[i] = np.zeros_like(p.value)
        elif v.shape != p.value.shape:
            raise ShapeError("velocity buffer does not match parameter")
        v *= state.momentum
        v += p.grad
        if p.decay and state.weight_decay:
            v += state.weight_decay * p.value
        p.value -= state.lr * v
