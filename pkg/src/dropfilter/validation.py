"""Statistical and numerical checks shared by the test suite and ``validate`` CLI."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .drop import DropSpec, dropfilter_apply, dropout_apply, droppath_apply, scalefilter_apply
from .errors import NumericError, ParameterError
from .layers import BatchNorm2d, Conv2d, GlobalAvgPool, Linear, ReLU, softmax_cross_entropy
from .models import ModelConfig, build_model
from .tensor import Rng

DROP_METHODS = ("dropout", "dropfilter", "scalefilter", "droppath")


@dataclass
class FreqTestReport:
    method: str
    rate: float
    n_trials: int
    observed_rate: float
    expected_rate: float
    sigma_bound: float

    @property
    def passed(self) -> bool:
        return abs(self.observed_rate - self.expected_rate) <= 3.0 * self.sigma_bound


def check_mask_frequency(method: str, rate: float, n_trials: int, rng: Rng) -> FreqTestReport:
    """Draw ``n_trials`` drop units through the operator and compare the drop fraction to 1-p.

    Units are elements (dropout), whole feature maps (DropFilter) or whole
    branches (DropPath). ScaleFilter never zeroes anything; for it the
    reported rate is the fraction of maps scaled below 1, which is 1/2 for any
    q > 0 by symmetry of the uniform interval.
    """
    if n_trials < 10_000:
        raise ParameterError("mask frequency checks need at least 10^4 trials")
    spec = DropSpec(method, rate)
    if method == "dropout":
        out, _ = dropout_apply(np.ones((1, 1, 1, n_trials)), spec, rng)
        dropped = out == 0.0
        expected = 1.0 - rate
    elif method == "dropfilter":
        out, _ = dropfilter_apply(np.ones((n_trials, 1, 2, 2)), spec, rng)
        dropped = np.all(out == 0.0, axis=(1, 2, 3))
        expected = 1.0 - rate
    elif method == "droppath":
        (out,), _ = droppath_apply([np.ones((n_trials, 1, 1, 1))], spec, rng)
        dropped = out == 0.0
        expected = 1.0 - rate
    elif method == "scalefilter":
        out, _ = scalefilter_apply(np.ones((n_trials, 1, 1, 1)), spec, rng)
        dropped = out < 1.0
        expected = 0.5 if rate > 0 else 0.0
    else:
        raise ParameterError(f"unknown method {method!r}")
    observed = float(np.mean(dropped))
    sigma = math.sqrt(expected * (1.0 - expected) / n_trials)
    return FreqTestReport(method, rate, n_trials, observed, expected, sigma)


def _apply_one(method: str, x: np.ndarray, spec: DropSpec, rng: Rng) -> np.ndarray:
    if method == "droppath":
        return droppath_apply([x], spec, rng)[0][0]
    fn = {"dropout": dropout_apply, "dropfilter": dropfilter_apply, "scalefilter": scalefilter_apply}[method]
    return fn(x, spec, rng)[0]


def expectation_bound(method: str, rate: float, m_draws: int) -> float:
    """4 sigma bound on the relative deviation of the Monte-Carlo mean multiplier."""
    var = rate ** 2 / 3.0 if method == "scalefilter" else (1.0 - rate) / rate
    return 4.0 * math.sqrt(var / m_draws)


def check_expectation_preserved(method: str, rate: float, x: np.ndarray, m_draws: int,
                                rng: Rng) -> tuple[float, float]:
    """Average ``m_draws`` independent train-mode applications to ``x``.

    Returns (max elementwise relative deviation of the mean from ``x``, the
    4 sigma bound it must stay under). Draws are independent per-sample masks
    over ``m_draws`` stacked copies of ``x``.
    """
    if m_draws < 1000:
        raise ParameterError("expectation checks need at least 10^3 draws")
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(x) < 1e-6):
        raise ParameterError("x must be bounded away from zero for a relative comparison")
    stacked = np.repeat(x[None], m_draws, axis=0).reshape((m_draws * x.shape[0],) + x.shape[1:])
    out = _apply_one(method, stacked, DropSpec(method, rate), rng)
    # averaging the residual keeps the identity case exactly zero
    residual = (out.reshape((m_draws,) + x.shape) - x).mean(axis=0)
    deviation = float(np.max(np.abs(residual) / np.abs(x)))
    return deviation, expectation_bound(method, rate, m_draws)


# ------------------------------------------------------------ gradient oracle


def gradient_check(loss_fn: Callable[[], float], inputs: dict[str, np.ndarray],
                   analytic: dict[str, np.ndarray], step: float = 1e-4,
                   max_coords: int | None = None, rng: Rng | None = None,
                   unchanged: Callable[[], bool] | None = None) -> float:
    """Largest relative error between analytic gradients and central differences.

    ``loss_fn`` must read the arrays in ``inputs`` (which are perturbed in
    place and restored). Relative error is |a - n| / max(|a|, |n|, 1e-8).
    With ``max_coords`` only that many randomly chosen coordinates per input
    are probed. ``unchanged``, if given, is called after each perturbed
    evaluation; a coordinate is skipped when it returns False (e.g. a ReLU
    switched sides).
    """
    if not 1e-6 <= step <= 1e-3:
        raise ParameterError(f"finite-difference step {step} outside [1e-6, 1e-3]")
    worst = 0.0
    for name, arr in inputs.items():
        grad = analytic[name]
        flat = arr.reshape(-1)
        if flat.base is not arr and not np.shares_memory(flat, arr):
            raise ParameterError(f"input {name!r} must be contiguous for in-place perturbation")
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort((rng or Rng(0)).permutation(flat.size)[:max_coords])
        gflat = grad.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            ok = unchanged is None or unchanged()
            flat[i] = orig - step
            down = loss_fn()
            ok = ok and (unchanged is None or unchanged())
            flat[i] = orig
            if not ok:
                continue
            if not (math.isfinite(up) and math.isfinite(down) and math.isfinite(gflat[i])):
                raise NumericError(f"non-finite value while checking {name}[{i}]")
            num = (up - down) / (2.0 * step)
            a = gflat[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


def _projection(shape, rng: Rng) -> np.ndarray:
    return rng.normal(shape)


def _kinky(relus, step: float) -> bool:
    return any(np.min(np.abs(r._x)) < 10 * step for r in relus if r._x.size)


def grad_fixture(name: str, seed: int, step: float = 1e-4) -> float:
    """Run one seeded gradient fixture and return its max relative error.

    Each fixture builds a small layer (<= 4 channels, <= 4x4 maps), projects
    its output onto a fixed random tensor to get a scalar loss, and compares
    backprop with central differences. Fixtures whose ReLU inputs come within
    10*step of the kink are redrawn with the next sub-seed.
    """
    for attempt in range(50):
        rng = Rng(seed).child("gradcheck", name, attempt)
        result = _FIXTURES[name](rng, step)
        if result is not None:
            return result
    raise NumericError(f"could not draw a kink-free fixture for {name}")


def _layer_check(layer, x, rng, step, train=False, relus=()):
    out = layer.forward(x, train)
    proj = _projection(out.shape, rng.child("proj"))
    if _kinky(relus, step):
        return None

    def loss():
        return float(np.sum(layer.forward(x, train) * proj))

    layer.zero_grad()
    layer.forward(x, train)
    gx = layer.backward(proj)
    inputs = {"x": x}
    analytic = {"x": gx}
    for pname, p in layer.named_params():
        inputs[pname] = p.value
        analytic[pname] = p.grad.copy()
    return gradient_check(loss, inputs, analytic, step)


def _fx_conv(rng, step):
    layer = Conv2d(3, 4, 3, stride=2, pad=1, rng=rng.child("w"))
    layer.bias.value[:] = rng.child("b").normal(4)
    return _layer_check(layer, rng.child("x").normal((2, 3, 4, 4)), rng, step)


def _fx_conv_s1(rng, step):
    layer = Conv2d(2, 3, 3, stride=1, pad=1, rng=rng.child("w"))
    layer.bias.value[:] = rng.child("b").normal(3)
    return _layer_check(layer, rng.child("x").normal((2, 2, 4, 4)), rng, step)


def _fx_bn(rng, step):
    layer = BatchNorm2d(3)
    layer.gamma.value[:] = 1.0 + 0.5 * rng.child("g").normal(3)
    layer.beta.value[:] = rng.child("b").normal(3)
    return _layer_check(layer, rng.child("x").normal((2, 3, 4, 4)), rng, step, train=True)


def _fx_bn_eval(rng, step):
    layer = BatchNorm2d(3)
    layer.running_mean[:] = rng.child("m").normal(3)
    layer.running_var[:] = 0.5 + rng.child("v").random(3)
    layer.gamma.value[:] = 1.0 + 0.5 * rng.child("g").normal(3)
    return _layer_check(layer, rng.child("x").normal((2, 3, 4, 4)), rng, step, train=False)


def _fx_relu(rng, step):
    layer = ReLU()
    return _layer_check(layer, rng.child("x").normal((2, 3, 4, 4)), rng, step, relus=(layer,))


def _fx_gap(rng, step):
    return _layer_check(GlobalAvgPool(), rng.child("x").normal((2, 4, 4, 4)), rng, step)


def _fx_linear(rng, step):
    layer = Linear(4, 3, rng.child("w"))
    layer.bias.value[:] = rng.child("b").normal(3)
    return _layer_check(layer, rng.child("x").normal((3, 4)), rng, step)


def _fx_softmax_ce(rng, step):
    logits = rng.child("x").normal((4, 5))
    labels = rng.child("y").integers(0, 5, size=4)
    _, grad = softmax_cross_entropy(logits, labels)
    return gradient_check(lambda: softmax_cross_entropy(logits, labels)[0], {"logits": logits},
                          {"logits": grad}, step)


class _ConvBnRelu:
    def __init__(self, rng):
        self.conv = Conv2d(2, 3, 3, 1, 1, rng.child("w"))
        self.bn = BatchNorm2d(3)
        self.bn.gamma.value[:] = 1.0 + 0.5 * rng.child("g").normal(3)
        self.bn.beta.value[:] = rng.child("b").normal(3)
        self.relu = ReLU()

    def named_params(self):
        # the conv bias is excluded: train-mode BN cancels it, so its exact gradient is 0
        yield "conv.weight", self.conv.weight
        yield "bn.gamma", self.bn.gamma
        yield "bn.beta", self.bn.beta

    def zero_grad(self):
        for _, p in self.named_params():
            p.zero_grad()

    def forward(self, x, train=True):
        return self.relu.forward(self.bn.forward(self.conv.forward(x), True))

    def backward(self, g):
        return self.conv.backward(self.bn.backward(self.relu.backward(g)))


def _fx_conv_bn_relu(rng, step):
    block = _ConvBnRelu(rng)
    return _layer_check(block, rng.child("x").normal((2, 2, 4, 4)), rng, step, train=True,
                        relus=(block.relu,))


def _fx_drop(method, rate):
    def fixture(rng, step):
        x = rng.child("x").normal((2, 3, 4, 4))
        spec = DropSpec(method, rate)
        proj = _projection(x.shape, rng.child("proj"))
        if method == "droppath":
            (_,), masks = droppath_apply([x], spec, rng.child("mask"))
            frozen = masks[0].values
        else:
            _, m = {"dropout": dropout_apply, "dropfilter": dropfilter_apply,
                    "scalefilter": scalefilter_apply}[method](x, spec, rng.child("mask"))
            frozen = m.values
        # backward of a frozen-mask drop multiplies by the same mask
        analytic = np.broadcast_to(proj * frozen, x.shape).copy()
        return gradient_check(lambda: float(np.sum(x * frozen * proj)), {"x": x}, {"x": analytic}, step)
    return fixture


def _fx_model(family):
    def fixture(rng, step):
        spec = DropSpec("dropfilter", 0.7)
        cfg = ModelConfig(family=family, n=1, width_factor=1, num_classes=3, input_shape=(3, 8, 8), drop=spec)
        model = build_model(cfg, seed=int(rng.child("init").integers(0, 2**31)))
        bn_rng = rng.child("gamma")
        for _, mod in model.modules():
            if isinstance(mod, BatchNorm2d):
                mod.gamma.value[:] = 1.0 + 0.3 * bn_rng.normal(mod.channels)
        x = rng.child("x").normal((4, 3, 8, 8))
        labels = rng.child("y").integers(0, 3, size=4)
        stream = rng.child("masks")

        relus = [m for _, m in model.modules() if isinstance(m, ReLU)]

        def loss():
            model.begin_step(stream)  # same stream every call, so the masks stay frozen
            return softmax_cross_entropy(model.forward(x, train=True), labels)[0]

        model.begin_step(stream)
        model.zero_grad()
        _, g = softmax_cross_entropy(model.forward(x, train=True), labels)
        base_masks = [r._mask.copy() for r in relus]
        inputs, analytic = {"x": x}, {"x": model.backward(g)}
        for path, mod in model.modules():
            for pname, p in mod.own_params().items():
                # every conv bias here feeds a train-mode BN, which cancels it exactly
                if isinstance(mod, Conv2d) and pname == "bias":
                    continue
                inputs[f"{path}.{pname}"] = p.value
                analytic[f"{path}.{pname}"] = p.grad.copy()
        def no_kink_crossed():
            return all(np.array_equal(r._mask, m) for r, m in zip(relus, base_masks))

        return gradient_check(loss, inputs, analytic, step, max_coords=6, rng=rng.child("coords"),
                              unchanged=no_kink_crossed)
    return fixture


_FIXTURES = {
    "conv_stride2": _fx_conv,
    "conv_stride1": _fx_conv_s1,
    "batchnorm_train": _fx_bn,
    "batchnorm_eval": _fx_bn_eval,
    "relu": _fx_relu,
    "global_avg_pool": _fx_gap,
    "linear": _fx_linear,
    "softmax_cross_entropy": _fx_softmax_ce,
    "conv_bn_relu": _fx_conv_bn_relu,
    "dropout": _fx_drop("dropout", 0.6),
    "dropfilter": _fx_drop("dropfilter", 0.6),
    "scalefilter": _fx_drop("scalefilter", 0.4),
    "droppath": _fx_drop("droppath", 0.6),
    "resnet_dropfilter": _fx_model("resnet"),
    "plain_dropfilter": _fx_model("plain"),
}

GRADIENT_FIXTURES = tuple(_FIXTURES)


# ------------------------------------------------------------------- suites


def run_suite(suite: str, seed: int = 0) -> Iterator[dict]:
    """Yield one report row per check: suite, check, value, bound, passed."""
    rng = Rng(seed).child("validate")
    if suite in ("masks", "all"):
        for method in DROP_METHODS:
            for p in (0.5, 0.8, 0.9, 0.95):
                r = check_mask_frequency(method, p, 100_000, rng.child("masks", method, int(p * 100)))
                yield {"suite": "masks", "check": f"{method}@{p}", "value": r.observed_rate,
                       "bound": f"{r.expected_rate}+-{3 * r.sigma_bound:.3g}", "passed": r.passed}
    if suite in ("expectation", "all"):
        x = 1.0 + rng.child("x").random((1, 2, 3, 3))
        cases = [("dropout", 0.8), ("dropout", 0.9), ("dropfilter", 0.8), ("dropfilter", 0.9),
                 ("droppath", 0.9), ("scalefilter", 0.2), ("scalefilter", 0.4), ("scalefilter", 0.6)]
        for method, rate in cases:
            dev, bound = check_expectation_preserved(method, rate, x, 10_000,
                                                     rng.child("exp", method, int(rate * 100)))
            yield {"suite": "expectation", "check": f"{method}@{rate}", "value": dev,
                   "bound": bound, "passed": dev <= bound}
    if suite in ("gradients", "all"):
        for name in GRADIENT_FIXTURES:
            for s in range(5):
                err = grad_fixture(name, seed * 1000 + s)
                yield {"suite": "gradients", "check": f"{name}#{s}", "value": err,
                       "bound": 1e-5, "passed": err < 1e-5}
