"""Rank-4 float64 tensors in (N, C, H, W) layout and a splittable seeded RNG.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of dtype float64;
the helpers here only enforce the rank-4 contract.
"""

from __future__ import annotations

import zlib
from typing import Iterable, Union

import numpy as np

from .errors import ParameterError, ShapeError, SizeError

DTYPE = np.float64
_MAX_ELEMENTS = np.iinfo(np.intp).max // np.dtype(DTYPE).itemsize

Label = Union[int, str]


def tensor_new(shape: Iterable[int], fill: float = 0.0) -> np.ndarray:
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4:
        raise ShapeError(f"expected a 4-tuple shape, got {shape}")
    if any(d < 0 for d in shape):
        raise ShapeError(f"negative dimension in {shape}")
    size = 1
    for d in shape:
        size *= d
    if size > _MAX_ELEMENTS:
        raise SizeError(f"shape {shape} needs {size} elements, more than addressable")
    return np.full(shape, fill, dtype=DTYPE)


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a contiguous float64 rank-4 array (no copy when already one)."""
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim != 4:
        raise ShapeError(f"expected rank-4 (N, C, H, W) tensor, got shape {arr.shape}")
    return arr


def broadcast_mul_channels(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Multiply every (H, W) feature map of ``x`` by the matching scalar of ``m``.

    ``m`` has shape (N, C, 1, 1); a leading dimension of 1 is accepted as a
    mask shared across the batch.
    """
    x = as_tensor(x)
    m = as_tensor(m)
    if m.shape[2:] != (1, 1):
        raise ShapeError(f"channel mask must be (N, C, 1, 1), got {m.shape}")
    if m.shape[1] != x.shape[1] or m.shape[0] not in (1, x.shape[0]):
        raise ShapeError(f"mask {m.shape} does not match tensor {x.shape}")
    return x * m


def _label_to_int(label: Label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ParameterError("stream labels must be nonnegative")
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


class Rng:
    """Seeded generator built on Philox (a counter-based bit generator).

    ``child(*labels)`` derives an independent sub-stream from the seed and the
    label path only, so sibling streams never depend on how many draws were
    taken elsewhere.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(key)
        ss = np.random.SeedSequence(entropy=self.seed & (2**64 - 1), spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *labels: Label) -> "Rng":
        return Rng(self.seed, self.key + tuple(_label_to_int(lb) for lb in labels))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key})"

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def bernoulli(self, count: int, p: float) -> np.ndarray:
        """``count`` independent {0, 1} draws, 1 with probability ``p``."""
        if not 0.0 <= p <= 1.0:
            raise ParameterError(f"Bernoulli probability must be in [0, 1], got {p}")
        u = self._gen.random(int(count))
        return (u < p).astype(DTYPE)

    def uniform(self, count: int, lo: float, hi: float) -> np.ndarray:
        """``count`` i.i.d. draws from the half-open interval [lo, hi)."""
        if lo > hi:
            raise ParameterError(f"uniform bounds reversed: lo={lo} > hi={hi}")
        u = self._gen.random(int(count))
        if lo == hi:
            return np.full(u.shape, lo, dtype=DTYPE)
        v = lo + (hi - lo) * u
        # rounding can land exactly on hi
        np.minimum(v, np.nextafter(hi, lo), out=v)
        return v

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)
