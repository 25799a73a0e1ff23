"""Network templates for CIFAR-sized inputs.

Every candidate drop location is built into the graph as a disabled
``DropSite``; ``attach_drop`` switches the relevant ones on. Sites carry no
parameters, so checkpoints do not depend on the attached regularizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .drop import APPLY, DropSpec, droppath_apply
from .errors import ConfigError, ShapeError
from .layers import BatchNorm2d, Conv2d, GlobalAvgPool, Linear, Module, ReLU
from .tensor import Rng, as_tensor

FAMILIES = ("plain", "resnet", "wrn", "two_path")
BASE_WIDTHS = (16, 32, 64)


@dataclass
class ModelConfig:
    family: str = "resnet"
    n: int = 1
    width_factor: int = 1
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)
    drop: DropSpec = field(default_factory=DropSpec)
    include_stem_drop: bool = True
    include_projection_drop: bool = True
    paths: int = 64

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}")
        if self.family != "two_path" and self.n < 1:
            raise ConfigError(f"blocks per stage must be >= 1, got {self.n}")
        if self.width_factor < 1:
            raise ConfigError("width_factor must be a positive integer")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")

    @property
    def depth(self) -> int:
        return 6 * self.n + 2

    @property
    def stage_widths(self) -> tuple[int, int, int]:
        return tuple(self.width_factor * w for w in BASE_WIDTHS)

    @property
    def name(self) -> str:
        if self.family == "plain":
            return f"plain-{self.width_factor}-{self.depth}"
        if self.family == "wrn" or (self.family == "resnet" and self.width_factor > 1):
            return f"WRN-{self.width_factor}-{self.depth}"
        if self.family == "resnet":
            return f"ResNet-{self.depth}"
        return f"two-path-{self.paths}"


class DropSite(Module):
    """A possible drop location; inert until ``enable`` is called.

    ``kind`` is one of stem, conv, projection (per-conv-output sites) or
    branch (a whole residual path, for DropPath).
    """

    def __init__(self, site_id: int, kind: str):
        self.site_id = site_id
        self.kind = kind
        self.spec: DropSpec | None = None
        self.rate: float = 1.0
        self.stream: Rng | None = None
        self.forced_mask = None
        self._values = None

    @property
    def active(self) -> bool:
        return self.spec is not None and self.spec.method != "none"

    def enable(self, spec: DropSpec):
        self.spec = spec
        self.rate = spec.rate

    def disable(self):
        self.spec = None

    def forward(self, x, train=False):
        self._values = None
        if not train or not self.active:
            return x
        method = self.spec.method
        if method == "droppath":
            forced = None if self.forced_mask is None else [self.forced_mask]
            outs, masks = droppath_apply([x], self.spec, self.stream, "train", self.rate, forced)
            self._values = masks[0].values
            return outs[0]
        y, mask = APPLY[method](x, self.spec, self.stream, "train", self.rate, self.forced_mask)
        self._values = mask.values
        return y

    def backward(self, grad_out):
        if self._values is None:
            return grad_out
        return grad_out * self._values


class Sequential(Module):
    def __init__(self, layers: list[Module]):
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out


class _SiteCounter:
    def __init__(self):
        self.next_id = 0

    def __call__(self, kind: str) -> DropSite:
        site = DropSite(self.next_id, kind)
        self.next_id += 1
        return site


class PreActBlock(Module):
    """BN -> ReLU -> conv -> BN -> ReLU -> conv, plus identity or 1x1 projection shortcut."""

    def __init__(self, c_in, c_out, stride, rng: Rng, sites: _SiteCounter):
        self.bn1 = BatchNorm2d(c_in)
        self.relu1 = ReLU()
        self.conv1 = Conv2d(c_in, c_out, 3, stride, 1, rng.child("conv1"))
        self.bn2 = BatchNorm2d(c_out)
        self.relu2 = ReLU()
        self.drop1 = sites("conv")
        self.conv2 = Conv2d(c_out, c_out, 3, 1, 1, rng.child("conv2"))
        self.drop2 = sites("conv")
        self.drop_branch = sites("branch")
        self.projection = None
        self.drop_proj = None
        if stride != 1 or c_in != c_out:
            self.projection = Conv2d(c_in, c_out, 1, stride, 0, rng.child("projection"))
            self.projection.is_projection = True
            self.drop_proj = sites("projection")

    def forward(self, x, train=False):
        a = self.relu1.forward(self.bn1.forward(x, train))
        h = self.conv1.forward(a)
        h = self.relu2.forward(self.bn2.forward(h, train))
        h = self.drop1.forward(h, train)
        h = self.drop2.forward(self.conv2.forward(h), train)
        h = self.drop_branch.forward(h, train)
        if self.projection is None:
            return h + x
        return h + self.drop_proj.forward(self.projection.forward(a), train)

    def backward(self, grad_out):
        g = self.drop_branch.backward(grad_out)
        g = self.conv2.backward(self.drop2.backward(g))
        g = self.bn2.backward(self.relu2.backward(self.drop1.backward(g)))
        ga = self.conv1.backward(g)
        if self.projection is None:
            return self.bn1.backward(self.relu1.backward(ga)) + grad_out
        ga = ga + self.projection.backward(self.drop_proj.backward(grad_out))
        return self.bn1.backward(self.relu1.backward(ga))


class PlainBlock(Module):
    """conv -> BN -> ReLU twice, drop after each activation, no shortcut."""

    def __init__(self, c_in, c_out, stride, rng: Rng, sites: _SiteCounter):
        self.body = Sequential([
            Conv2d(c_in, c_out, 3, stride, 1, rng.child("conv1")),
            BatchNorm2d(c_out), ReLU(), sites("conv"),
            Conv2d(c_out, c_out, 3, 1, 1, rng.child("conv2")),
            BatchNorm2d(c_out), ReLU(), sites("conv"),
        ])

    def forward(self, x, train=False):
        return self.body.forward(x, train)

    def backward(self, grad_out):
        return self.body.backward(grad_out)


class Model(Module):
    def __init__(self, cfg: ModelConfig, stem: Module, stages: list[Module], head: Module):
        self.cfg = cfg
        self.stem = stem
        self.stages = stages
        self.head = head
        self._sites = [m for _, m in self.modules() if isinstance(m, DropSite)]
        self.drop_spec = DropSpec()

    @property
    def sites(self) -> list[DropSite]:
        return self._sites

    def forward(self, x, train=False):
        x = as_tensor(x)
        if x.shape[1:] != tuple(self.cfg.input_shape):
            raise ShapeError(f"model expects inputs {self.cfg.input_shape}, got {x.shape[1:]}")
        x = self.stem.forward(x, train)
        for stage in self.stages:
            x = stage.forward(x, train)
        return self.head.forward(x, train)

    def backward(self, grad_out):
        g = self.head.backward(grad_out)
        for stage in reversed(self.stages):
            g = stage.backward(g)
        return self.stem.backward(g)

    def active_sites(self) -> list[DropSite]:
        return [s for s in self.sites if s.active]

    def begin_step(self, stream: Rng | None):
        """Give every active site its own sub-stream for the coming forward pass."""
        for s in self.sites:
            s.stream = None if stream is None else stream.child(s.site_id)

    def set_rate(self, rate: float):
        for s in self.sites:
            s.rate = rate

    def weighted_layers(self) -> int:
        """Convs and fully connected layers, not counting projection shortcuts."""
        return sum(1 for _, m in self.modules()
                   if isinstance(m, Linear) or (isinstance(m, Conv2d) and not getattr(m, "is_projection", False)))

    def conv_layers(self) -> list[Conv2d]:
        return [m for _, m in self.modules() if isinstance(m, Conv2d)]

    def shortcut_edges(self) -> int:
        return sum(1 for _, m in self.modules() if isinstance(m, PreActBlock))

    def param_count(self) -> int:
        return sum(p.value.size for _, p in self.named_params())

    def state_items(self) -> list[tuple[str, np.ndarray]]:
        """Parameters and running statistics in model-definition order."""
        items = []
        for path, mod in self.modules():
            for name, p in mod.own_params().items():
                items.append((f"{path}.{name}", p.value))
            for name, b in mod.own_buffers().items():
                items.append((f"{path}.{name}", b))
        return items


def _stage_plan(cfg: ModelConfig):
    widths = cfg.stage_widths
    plan = []
    c_in = widths[0]
    for s, c_out in enumerate(widths):
        for b in range(cfg.n):
            stride = 2 if (s > 0 and b == 0) else 1
            plan.append((s, b, c_in, c_out, stride))
            c_in = c_out
    return plan


def build_resnet(cfg: ModelConfig, seed: int = 0) -> Model:
    """Pre-activation ResNet (width 1) or wide ResNet (width > 1) with 6n+2 weighted layers."""
    if cfg.family not in ("resnet", "wrn"):
        raise ConfigError(f"build_resnet needs family resnet or wrn, got {cfg.family}")
    rng = Rng(seed).child("init")
    sites = _SiteCounter()
    c0 = cfg.stage_widths[0]
    stem = Sequential([Conv2d(cfg.input_shape[0], c0, 3, 1, 1, rng.child("stem")), sites("stem")])
    stages = [[] for _ in range(3)]
    for s, b, c_in, c_out, stride in _stage_plan(cfg):
        stages[s].append(PreActBlock(c_in, c_out, stride, rng.child("stage", s, b), sites))
    head = Sequential([BatchNorm2d(cfg.stage_widths[2]), ReLU(), GlobalAvgPool(),
                       Linear(cfg.stage_widths[2], cfg.num_classes, rng.child("fc"))])
    model = Model(cfg, stem, [Sequential(st) for st in stages], head)
    attach_drop(model, cfg.drop)
    return model


def build_plain(cfg: ModelConfig, seed: int = 0) -> Model:
    """The ResNet/WRN template with shortcuts removed, conv -> BN -> ReLU ordering."""
    if cfg.family != "plain":
        raise ConfigError(f"build_plain needs family plain, got {cfg.family}")
    rng = Rng(seed).child("init")
    sites = _SiteCounter()
    c0 = cfg.stage_widths[0]
    stem = Sequential([Conv2d(cfg.input_shape[0], c0, 3, 1, 1, rng.child("stem")),
                       BatchNorm2d(c0), ReLU(), sites("stem")])
    stages = [[] for _ in range(3)]
    for s, b, c_in, c_out, stride in _stage_plan(cfg):
        stages[s].append(PlainBlock(c_in, c_out, stride, rng.child("stage", s, b), sites))
    head = Sequential([GlobalAvgPool(), Linear(cfg.stage_widths[2], cfg.num_classes, rng.child("fc"))])
    model = Model(cfg, stem, [Sequential(st) for st in stages], head)
    attach_drop(model, cfg.drop)
    return model


def attach_drop(model: Model, spec: DropSpec, include_stem: bool | None = None,
                include_projections: bool | None = None) -> int:
    """Enable drop sites for ``spec`` and return how many are active.

    Per-map and per-element methods sit after every conv output; DropPath sits
    on each residual branch. Stem and projection sites follow the model config
    unless overridden.
    """
    cfg = model.cfg
    include_stem = cfg.include_stem_drop if include_stem is None else include_stem
    include_projections = cfg.include_projection_drop if include_projections is None else include_projections
    for s in model.sites:
        s.disable()
    model.drop_spec = spec
    if spec.method == "none":
        return 0
    if spec.method == "droppath":
        wanted = {"branch"}
        if not any(s.kind == "branch" for s in model.sites):
            raise ConfigError(f"droppath needs residual branches; {cfg.name} has none")
    else:
        wanted = {"conv"}
        if include_stem:
            wanted.add("stem")
        if include_projections:
            wanted.add("projection")
    for s in model.sites:
        if s.kind in wanted:
            s.enable(spec)
    return len(model.active_sites())


class TwoPathFixture(Module):
    """One c-filter conv next to its c single-filter paths (shared weight slices).

    Each path sees the same input and yields one feature map; concatenating the
    path outputs reproduces the single conv's output.
    """

    def __init__(self, c_in: int, c: int, k: int = 3, seed: int = 0):
        self.single = Conv2d(c_in, c, k, 1, k // 2, Rng(seed).child("init", "two_path"))
        self.single.bias.value[:] = Rng(seed).child("init", "bias").normal(c, 0.1)
        self.paths = []
        for i in range(c):
            path = Conv2d(c_in, 1, k, 1, k // 2)
            path.weight.value = self.single.weight.value[i:i + 1]
            path.bias.value = self.single.bias.value[i:i + 1]
            self.paths.append(path)

    def forward_single(self, x, spec: DropSpec | None = None, rng: Rng | None = None, mask=None):
        y = self.single.forward(x)
        if spec is None or spec.method == "none":
            return y
        return APPLY[spec.method](y, spec, rng, "train", mask=mask)[0]

    def forward_paths(self, x, spec: DropSpec | None = None, rng: Rng | None = None, masks=None):
        outs = [p.forward(x) for p in self.paths]
        if spec is not None and spec.method != "none":
            outs, _ = droppath_apply(outs, spec, rng, "train", mask=masks)
        return np.concatenate(outs, axis=1)


def build_two_path(cfg: ModelConfig, seed: int = 0) -> TwoPathFixture:
    if cfg.family != "two_path":
        raise ConfigError(f"build_two_path needs family two_path, got {cfg.family}")
    return TwoPathFixture(cfg.input_shape[0], cfg.paths, 3, seed)


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    if cfg.family in ("resnet", "wrn"):
        return build_resnet(cfg, seed)
    if cfg.family == "plain":
        return build_plain(cfg, seed)
    raise ConfigError("two_path is a fixture, not a trainable classifier")
