import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dropfilter.errors import ParameterError, ShapeError, SizeError
from dropfilter.tensor import Rng, broadcast_mul_channels, tensor_new


def test_tensor_new_fill():
    t = tensor_new((1, 1, 2, 2), 0.0)
    assert t.shape == (1, 1, 2, 2) and t.dtype == np.float64
    assert np.all(t == 0.0)
    t = tensor_new((2, 3, 4, 4), 1.0)
    assert t.size == 96 and np.all(t == 1.0)


def test_tensor_new_zero_dimension():
    t = tensor_new((1, 0, 5, 5), 7.0)
    assert t.size == 0


def test_tensor_new_errors():
    with pytest.raises(ShapeError):
        tensor_new((1, -1, 2, 2))
    with pytest.raises(ShapeError):
        tensor_new((2, 2, 2))
    with pytest.raises(SizeError):
        tensor_new((2**40, 2**20, 2**10, 1))


def test_broadcast_mul_channels_examples():
    x = np.ones((1, 2, 2, 2))
    out = broadcast_mul_channels(x, np.array([1.0, 0.0]).reshape(1, 2, 1, 1))
    assert np.all(out[0, 0] == 1.0) and np.all(out[0, 1] == 0.0)
    assert np.array_equal(broadcast_mul_channels(x, np.ones((1, 2, 1, 1))), x)
    assert broadcast_mul_channels(np.full((1, 1, 1, 1), 3.0), np.full((1, 1, 1, 1), 2.0))[0, 0, 0, 0] == 6.0


def test_broadcast_mul_channels_shape_errors():
    x = np.ones((2, 3, 4, 4))
    with pytest.raises(ShapeError):
        broadcast_mul_channels(x, np.ones((2, 2, 1, 1)))
    with pytest.raises(ShapeError):
        broadcast_mul_channels(x, np.ones((2, 3, 4, 4)))
    with pytest.raises(ShapeError):
        broadcast_mul_channels(x, np.ones((3, 3, 1, 1)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a=st.floats(-10, 10))
def test_broadcast_mul_channels_is_linear(seed, a):
    g = np.random.default_rng(seed)
    x = g.normal(size=(2, 3, 4, 4))
    m = g.normal(size=(2, 3, 1, 1))
    np.testing.assert_allclose(broadcast_mul_channels(a * x, m), a * broadcast_mul_channels(x, m),
                               rtol=1e-12, atol=1e-12)


def test_bernoulli_degenerate():
    r = Rng(0)
    assert np.all(r.bernoulli(1000, 1.0) == 1.0)
    assert np.all(r.bernoulli(1000, 0.0) == 0.0)


def test_bernoulli_mean_at_p09():
    # 3 sigma with sigma = sqrt(0.9 * 0.1 / 1e5) ~= 0.00095
    mean = Rng(7).bernoulli(100_000, 0.9).mean()
    assert 0.897 <= mean <= 0.903


def test_bernoulli_rejects_bad_p():
    with pytest.raises(ParameterError):
        Rng(0).bernoulli(10, 1.5)
    with pytest.raises(ParameterError):
        Rng(0).bernoulli(10, -0.1)


def test_bernoulli_consumes_exactly_count_draws():
    a, b = Rng(3), Rng(3)
    a.bernoulli(17, 0.5)
    b.random(17)
    assert a.random() == b.random()


def test_uniform_examples():
    r = Rng(1)
    assert np.all(r.uniform(100, 1.0, 1.0) == 1.0)
    v = r.uniform(100_000, 0.6, 1.4)
    assert v.min() >= 0.6 and v.max() < 1.4
    # 3 sigma with sigma = 0.8 / sqrt(12) / sqrt(1e5)
    assert 0.9978 <= v.mean() <= 1.0022
    with pytest.raises(ParameterError):
        r.uniform(3, 2.0, 1.0)


def test_same_seed_same_sequence():
    assert np.array_equal(Rng(99).random(1000), Rng(99).random(1000))
    assert not np.array_equal(Rng(99).random(10), Rng(100).random(10))


def test_child_streams_ignore_parent_consumption():
    fresh = Rng(5).child("drop", 3, 7).random(20)
    used = Rng(5)
    used.random(1000)
    used.child("other").random(50)
    assert np.array_equal(used.child("drop", 3, 7).random(20), fresh)
    assert not np.array_equal(Rng(5).child("drop", 3, 8).random(20), fresh)


def test_bernoulli_convergence_across_seeds():
    # |mean - p| < 3 sqrt(p(1-p)/n) should hold for >= 99% of seeds
    p, n = 0.8, 100_000
    bound = 3 * np.sqrt(p * (1 - p) / n)
    hits = sum(abs(Rng(s).bernoulli(n, p).mean() - p) < bound for s in range(200))
    assert hits >= 198
