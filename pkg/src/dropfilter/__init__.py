"""Structured data-drop regularizers for CNNs (dropout, DropFilter, ScaleFilter,
DropPath) on a from-scratch NumPy training stack."""

from .drop import (DropMask, DropSpec, dropfilter_apply, dropout_apply, droppath_apply,
                   retention_schedule, scalefilter_apply)
from .models import ModelConfig, attach_drop, build_model, build_plain, build_resnet, build_two_path
from .tensor import Rng, broadcast_mul_channels, tensor_new

__all__ = [
    "DropMask", "DropSpec", "ModelConfig", "Rng", "attach_drop", "broadcast_mul_channels",
    "build_model", "build_plain", "build_resnet", "build_two_path", "dropfilter_apply",
    "dropout_apply", "droppath_apply", "retention_schedule", "scalefilter_apply", "tensor_new",
]
