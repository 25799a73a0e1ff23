"""Data-drop regularizers: dropout, DropFilter, ScaleFilter and DropPath.

All four use the inverted convention: any rescaling happens in training, and
eval mode returns the input object unchanged. Each ``*_apply`` accepts an
optional ``mask`` holding the raw draw (0/1 retention flags, or ScaleFilter
factors) to force a specific outcome; otherwise the mask is drawn from ``rng``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ParameterError, ShapeError
from .tensor import DTYPE, Rng, as_tensor, broadcast_mul_channels

METHODS = ("none", "dropout", "dropfilter", "scalefilter", "droppath")
SCHEDULES = ("constant", "curriculum")
GRANULARITIES = ("per_sample", "per_batch")


@dataclass(frozen=True)
class DropSpec:
    """Which regularizer to attach and how its rate evolves.

    ``rate`` is the retention probability p for dropout, DropFilter and
    DropPath, and the noise half-width q for ScaleFilter. With the curriculum
    schedule the rate moves linearly from ``start_rate`` to ``end_rate``.
    """

    method: str = "none"
    rate: float = 1.0
    schedule: str = "constant"
    start_rate: float = 1.0
    end_rate: float = 1.0
    granularity: str = "per_sample"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown drop method {self.method!r}; expected one of {METHODS}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"unknown granularity {self.granularity!r}")
        for name in ("rate", "start_rate", "end_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.schedule == "curriculum" and self.start_rate < self.end_rate:
            raise ConfigError("curriculum rates must decrease (start_rate >= end_rate)")

    @property
    def identity_rate(self) -> float:
        return 0.0 if self.method == "scalefilter" else 1.0


@dataclass
class DropMask:
    method: str
    values: np.ndarray  # multiplier actually applied, 1/p scaling included
    rate: float


def _check_p(p: float):
    if not 0.0 < p <= 1.0:
        raise ParameterError(f"retention rate must be in (0, 1] in train mode, got {p}")


def _check_method(spec: DropSpec, method: str):
    if spec.method != method:
        raise ParameterError(f"spec method is {spec.method!r}, expected {method!r}")


def _mask_shape(x: np.ndarray, granularity: str, per_map: bool) -> tuple[int, ...]:
    n, c, h, w = x.shape
    lead = n if granularity == "per_sample" else 1
    return (lead, c, 1, 1) if per_map else (lead, c, h, w)


def _draw_or_force(shape, draw, mask) -> np.ndarray:
    if mask is None:
        return draw(int(np.prod(shape))).reshape(shape)
    forced = np.asarray(mask, dtype=DTYPE)
    if forced.size == int(np.prod(shape)):
        forced = forced.reshape(shape)
    try:
        return np.broadcast_to(forced, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"forced mask of shape {forced.shape} does not fit {shape}") from exc


def dropout_apply(x, spec: DropSpec, rng: Rng | None, mode: str = "train", rate: float | None = None,
                  mask=None) -> tuple[np.ndarray, DropMask | None]:
    """Elementwise Bernoulli drop with 1/p scaling; the mask has the shape of ``x``."""
    _check_method(spec, "dropout")
    p = spec.rate if rate is None else rate
    if mode == "eval":
        return x, None
    _check_p(p)
    x = as_tensor(x)
    shape = _mask_shape(x, spec.granularity, per_map=False)
    r = _draw_or_force(shape, lambda k: rng.bernoulli(k, p), mask)
    values = r / p
    return x * values, DropMask("dropout", values, p)


def dropfilter_apply(x, spec: DropSpec, rng: Rng | None, mode: str = "train", rate: float | None = None,
                     mask=None) -> tuple[np.ndarray, DropMask | None]:
    """Drop whole feature maps: one Bernoulli(p) flag per (sample, channel)."""
    _check_method(spec, "dropfilter")
    p = spec.rate if rate is None else rate
    if mode == "eval":
        return x, None
    _check_p(p)
    x = as_tensor(x)
    shape = _mask_shape(x, spec.granularity, per_map=True)
    r = _draw_or_force(shape, lambda k: rng.bernoulli(k, p), mask)
    values = r / p
    return broadcast_mul_channels(x, values), DropMask("dropfilter", values, p)


def scalefilter_apply(x, spec: DropSpec, rng: Rng | None, mode: str = "train", rate: float | None = None,
                      mask=None) -> tuple[np.ndarray, DropMask | None]:
    """Scale each feature map by a factor drawn from Uniform[1-q, 1+q); no rescaling."""
    _check_method(spec, "scalefilter")
    q = spec.rate if rate is None else rate
    if not 0.0 <= q <= 1.0:
        raise ParameterError(f"ScaleFilter q must be in [0, 1], got {q}")
    if mode == "eval":
        return x, None
    x = as_tensor(x)
    shape = _mask_shape(x, spec.granularity, per_map=True)
    values = _draw_or_force(shape, lambda k: rng.uniform(k, 1.0 - q, 1.0 + q), mask)
    return broadcast_mul_channels(x, values), DropMask("scalefilter", values, q)


def droppath_apply(branch_outputs: Sequence[np.ndarray], spec: DropSpec, rng: Rng | None,
                   mode: str = "train", rate: float | None = None,
                   mask=None) -> tuple[list[np.ndarray], list[DropMask] | None]:
    """Keep or zero each branch as a whole, scaling survivors by 1/p.

    Identity shortcuts are not branches here; callers pass only the droppable
    paths. ``mask`` may force one retention flag (or per-sample vector) per
    branch.
    """
    _check_method(spec, "droppath")
    if len(branch_outputs) < 1:
        raise ParameterError("droppath needs at least one branch")
    p = spec.rate if rate is None else rate
    if mode == "eval":
        return list(branch_outputs), None
    _check_p(p)
    if mask is not None and len(mask) != len(branch_outputs):
        raise ShapeError(f"{len(mask)} forced path masks for {len(branch_outputs)} branches")
    outs, masks = [], []
    for i, b in enumerate(branch_outputs):
        b = as_tensor(b)
        lead = b.shape[0] if spec.granularity == "per_sample" else 1
        shape = (lead, 1, 1, 1)
        forced = None if mask is None else mask[i]
        r = _draw_or_force(shape, lambda k: rng.bernoulli(k, p), forced)
        values = r / p
        outs.append(b * values)
        masks.append(DropMask("droppath", values, p))
    return outs, masks


def retention_schedule(spec: DropSpec, epoch: int, total_epochs: int) -> float:
    """Effective rate for ``epoch`` (0-based), fixed for the whole epoch."""
    if total_epochs <= 0:
        raise ParameterError("total_epochs must be positive")
    if not 0 <= epoch < total_epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {total_epochs})")
    if spec.schedule == "constant":
        return spec.rate
    if total_epochs == 1:
        return spec.start_rate
    if epoch == total_epochs - 1:
        return spec.end_rate
    frac = epoch / (total_epochs - 1)
    return spec.start_rate + (spec.end_rate - spec.start_rate) * frac


APPLY = {
    "dropout": dropout_apply,
    "dropfilter": dropfilter_apply,
    "scalefilter": scalefilter_apply,
}
