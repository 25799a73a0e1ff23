import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dropfilter.checkpoint import MAGIC, decode, encode, load_checkpoint, save_checkpoint
from dropfilter.errors import DataError, FormatError, ShapeError
from dropfilter.layers import (BatchNorm2d, Conv2d, GlobalAvgPool, Linear, ReLU, batchnorm_forward,
                               conv2d_backward, conv2d_forward, global_avg_pool, linear_forward, relu,
                               softmax_cross_entropy)
from dropfilter.models import ModelConfig, build_model
from dropfilter.tensor import Rng

from conftest import random_tensor


def naive_conv(x, w, b, stride, pad):
    """Six nested loops over the definition, used as the oracle."""
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for y in range(ho):
                for z in range(wo):
                    acc = b[o]
                    for ci in range(c):
                        for u in range(k):
                            for v in range(k):
                                acc += w[o, ci, u, v] * xp[i, ci, y * stride + u, z * stride + v]
                    out[i, o, y, z] = acc
    return out


def scalar_conv():
    layer = Conv2d(1, 1, k=1)
    layer.weight.value[...] = 2.0
    return layer


def test_conv_scalar_example():
    layer = scalar_conv()
    assert conv2d_forward(layer, np.full((1, 1, 1, 1), 3.0))[0, 0, 0, 0] == 6.0


def test_conv_overlap_counts():
    layer = Conv2d(1, 1, k=3, pad=1)
    layer.weight.value[...] = 1.0
    out = conv2d_forward(layer, np.ones((1, 1, 3, 3)))[0, 0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0
    assert out[0, 1] == 6.0


def test_conv_output_shape():
    layer = Conv2d(16, 32, k=3, stride=2, pad=1, rng=Rng(0))
    assert conv2d_forward(layer, np.zeros((2, 16, 32, 32))).shape == (2, 32, 16, 16)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (3, 2, 5)])
def test_conv_matches_loop_oracle(stride, pad, k):
    rng = Rng(stride * 10 + pad + k)
    layer = Conv2d(3, 4, k=k, stride=stride, pad=pad, rng=rng)
    layer.bias.value[...] = rng.normal(4, 1.0)
    x = rng.normal((2, 3, 7, 6), 1.0)
    expect = naive_conv(x, layer.weight.value, layer.bias.value, stride, pad)
    np.testing.assert_allclose(conv2d_forward(layer, x), expect, rtol=1e-12, atol=1e-12)


def test_conv_backward_scalar():
    layer = scalar_conv()
    x = np.full((1, 1, 1, 1), 3.0)
    gx = conv2d_backward(layer, x, np.ones((1, 1, 1, 1)))
    assert gx[0, 0, 0, 0] == 2.0
    assert layer.weight.grad[0, 0, 0, 0] == 3.0
    assert layer.bias.grad[0] == 1.0


def test_conv_backward_zero_grad():
    layer = Conv2d(2, 3, k=3, pad=1, rng=Rng(1))
    x = random_tensor(2, (2, 2, 5, 5))
    gx = conv2d_backward(layer, x, np.zeros((2, 3, 5, 5)))
    assert not gx.any() and not layer.weight.grad.any() and not layer.bias.grad.any()


def test_conv_backward_is_adjoint_of_forward():
    # <conv(x), g> = <x, conv^T(g)> for the bias-free map
    layer = Conv2d(3, 4, k=3, stride=2, pad=1, rng=Rng(2), bias=False)
    x = random_tensor(3, (2, 3, 9, 9))
    y = conv2d_forward(layer, x)
    g = random_tensor(4, y.shape)
    gx = conv2d_backward(layer, x, g)
    assert math.isclose((y * g).sum(), (x * gx).sum(), rel_tol=1e-11)


def test_conv_errors():
    layer = Conv2d(3, 4, k=3, rng=Rng(0))
    with pytest.raises(ShapeError):
        conv2d_forward(layer, np.zeros((1, 2, 8, 8)))
    with pytest.raises(ShapeError):
        conv2d_forward(layer, np.zeros((1, 3, 2, 2)))
    with pytest.raises(ShapeError):
        Conv2d(3, 4, k=3, stride=0)


def test_conv_he_init_std():
    w = Conv2d(64, 64, k=3, rng=Rng(0)).weight.value
    assert abs(w.std() / math.sqrt(2 / (9 * 64)) - 1) < 0.02


def test_batchnorm_two_values():
    bn = BatchNorm2d(1)
    out = batchnorm_forward(bn, np.array([1.0, 3.0]).reshape(2, 1, 1, 1), train=True).ravel()
    expect = 1 / math.sqrt(1 + 1e-5)
    np.testing.assert_allclose(out, [-expect, expect], rtol=1e-15)
    assert abs(out[0]) < 1


def test_batchnorm_constant_input():
    out = batchnorm_forward(BatchNorm2d(2), np.full((3, 2, 2, 2), 5.0), train=True)
    assert np.all(out == 0.0)


def test_batchnorm_eval_identity():
    bn = BatchNorm2d(3, eps=0.0)
    x = random_tensor(5, (2, 3, 4, 4))
    assert np.array_equal(batchnorm_forward(bn, x, train=False), x)


def test_batchnorm_degenerate_batch():
    with pytest.raises(DataError):
        batchnorm_forward(BatchNorm2d(2), np.ones((1, 2, 1, 1)), train=True)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_batchnorm_train_moments(seed):
    x = random_tensor(seed, (4, 3, 5, 5), scale=50.0) + 7.0
    out = batchnorm_forward(BatchNorm2d(3), x, train=True)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-6)


def test_batchnorm_running_stats():
    bn = BatchNorm2d(1)
    x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    bn.forward(x, train=True)
    assert bn.running_mean[0] == pytest.approx(0.2)
    # unbiased batch variance is 2
    assert bn.running_var[0] == pytest.approx(0.9 + 0.2)


def test_batchnorm_params_skip_decay():
    bn = BatchNorm2d(4)
    assert not bn.gamma.decay and not bn.beta.decay


def test_relu_examples():
    r = ReLU()
    out = r.forward(np.array([-1.0, 2.0, 0.0]).reshape(1, 1, 1, 3))
    assert out.ravel().tolist() == [0.0, 2.0, 0.0]
    assert r.backward(np.ones((1, 1, 1, 3))).ravel().tolist() == [0.0, 1.0, 0.0]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_relu_idempotent_and_nonnegative(seed):
    x = random_tensor(seed, (2, 3, 4, 4))
    y = relu(x)
    assert np.all(y >= 0) and np.array_equal(relu(y), y)


def test_global_avg_pool():
    assert global_avg_pool(np.ones((1, 1, 3, 3)))[0, 0, 0, 0] == 1.0
    assert global_avg_pool(np.array([1.0, 2, 3, 4]).reshape(1, 1, 2, 2))[0, 0, 0, 0] == 2.5
    assert global_avg_pool(np.zeros((8, 64, 8, 8))).shape == (8, 64, 1, 1)
    with pytest.raises(ShapeError):
        global_avg_pool(np.zeros((1, 1, 0, 3)))
    gap = GlobalAvgPool()
    gap.forward(np.zeros((1, 1, 2, 2)))
    assert np.all(gap.backward(np.ones((1, 1, 1, 1))) == 0.25)


def test_linear_examples():
    layer = Linear(2, 2)
    layer.weight.value[...] = np.eye(2)
    x = np.array([[3.0, -4.0]])
    assert np.array_equal(linear_forward(layer, x), x)
    layer.weight.value[...] = 0.0
    layer.bias.value[...] = [1.0, 2.0]
    assert linear_forward(layer, x).tolist() == [[1.0, 2.0]]
    dot = Linear(2, 1)
    dot.weight.value[...] = [[1.0, 1.0]]
    assert linear_forward(dot, np.array([[2.0, 3.0]])).tolist() == [[5.0]]
    with pytest.raises(ShapeError):
        linear_forward(dot, np.zeros((1, 3)))


def test_softmax_cross_entropy_examples():
    loss, _ = softmax_cross_entropy(np.zeros((1, 10)), np.array([3]))
    assert loss == pytest.approx(math.log(10), rel=1e-12)
    logits = np.zeros((1, 10))
    logits[0, 4] = 1000.0
    loss, _ = softmax_cross_entropy(logits, np.array([4]))
    assert loss < 1e-6 and math.isfinite(loss)
    _, grad = softmax_cross_entropy(np.zeros((1, 2)), np.array([0]))
    assert grad.tolist() == [[-0.5, 0.5]]
    with pytest.raises(DataError):
        softmax_cross_entropy(np.zeros((1, 2)), np.array([2]))


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(family="resnet", n=1, width_factor=1, num_classes=10)
    a = build_model(cfg, seed=1)
    b = build_model(cfg, seed=2)
    a.forward(random_tensor(0, (4, 3, 32, 32)), train=True)  # move BN running stats
    path = tmp_path / "m.bin"
    save_checkpoint(a, path)
    assert path.read_bytes().startswith(MAGIC)
    load_checkpoint(b, path)
    for (na, va), (nb, vb) in zip(a.state_items(), b.state_items()):
        assert na == nb and np.array_equal(va, vb)
    x = random_tensor(9, (2, 3, 32, 32))
    assert np.array_equal(a.forward(x), b.forward(x))


def test_checkpoint_layout_and_errors(tmp_path):
    items = [("w", np.array([1.5, -2.0])), ("b", np.zeros(0))]
    raw = encode(items)
    # magic, then u32 name length, name, u64 count, float64 values
    assert raw[8:12] == (1).to_bytes(4, "little") and raw[12:13] == b"w"
    assert raw[13:21] == (2).to_bytes(8, "little")
    assert np.frombuffer(raw[21:37], "<f8").tolist() == [1.5, -2.0]
    assert [(n, v.tolist()) for n, v in decode(raw)] == [("w", [1.5, -2.0]), ("b", [])]
    with pytest.raises(FormatError):
        decode(b"NOTMAGIC" + raw[8:])
    with pytest.raises(FormatError):
        decode(raw[:-3])
    small = build_model(ModelConfig(family="plain", n=1, width_factor=1, num_classes=10))
    big = build_model(ModelConfig(family="plain", n=1, width_factor=2, num_classes=10))
    save_checkpoint(small, tmp_path / "s.bin")
    with pytest.raises(FormatError):
        load_checkpoint(big, tmp_path / "s.bin")
