import numpy as np
import pytest

from dropfilter.data import (AugmentPolicy, Dataset, augment, cifar_bytes, denormalize_images, load_cifar,
                             normalize, parse_cifar_bytes, read_cifar_binary, subset_sample,
                             synthetic_dataset, write_cifar_binary)
from dropfilter.errors import DataError, FormatError
from dropfilter.tensor import Rng


def pattern_record(label, start, label_bytes=1, coarse=0):
    head = bytes([coarse, label]) if label_bytes == 2 else bytes([label])
    return head + bytes((start + i) % 256 for i in range(3072))


def test_single_zero_record(tmp_path):
    path = tmp_path / "one.bin"
    path.write_bytes(bytes(3073))
    ds = read_cifar_binary(path)
    assert len(ds) == 1 and ds.labels.tolist() == [0]
    assert ds.images.shape == (1, 3, 32, 32) and not ds.images.any()


def test_hand_indexed_oracle():
    raw = pattern_record(7, 0) + pattern_record(2, 100)
    ds = parse_cifar_bytes(raw)
    assert ds.labels.tolist() == [7, 2]
    for r, start in enumerate((0, 100)):
        for c, y, x in [(0, 0, 0), (0, 0, 31), (0, 1, 0), (1, 0, 0), (2, 31, 31), (1, 17, 5)]:
            # record layout: label byte, then 1024 red, 1024 green, 1024 blue, row-major
            offset = r * 3073 + 1 + c * 1024 + y * 32 + x
            assert ds.images[r, c, y, x] == raw[offset] == (start + c * 1024 + y * 32 + x) % 256


def test_cifar100_fine_label():
    ds = parse_cifar_bytes(pattern_record(93, 5, label_bytes=2, coarse=11), "cifar100")
    assert ds.labels.tolist() == [93] and ds.coarse_labels.tolist() == [11]
    assert ds.num_classes == 100 and ds.images[0, 0, 0, 0] == 5


def test_binary_round_trip(tmp_path):
    raw = b"".join(pattern_record(k, 3 * k) for k in range(10))
    ds = parse_cifar_bytes(raw)
    assert cifar_bytes(ds) == raw
    write_cifar_binary(ds, tmp_path / "x.bin")
    assert (tmp_path / "x.bin").read_bytes() == raw


def test_binary_errors():
    with pytest.raises(FormatError):
        parse_cifar_bytes(bytes(3072))
    with pytest.raises(DataError):
        parse_cifar_bytes(pattern_record(10, 0))


def test_load_cifar_layout(tmp_path):
    root = tmp_path / "cifar-10-batches-bin"
    root.mkdir()
    for i in range(1, 6):
        (root / f"data_batch_{i}.bin").write_bytes(pattern_record(i, i) * 2)
    (root / "test_batch.bin").write_bytes(pattern_record(0, 0))
    train, test = load_cifar(tmp_path)
    assert len(train) == 10 and len(test) == 1
    assert train.channel_means is not None and train.channel_means.shape == (3,)
    with pytest.raises(DataError):
        load_cifar(tmp_path / "missing")


def test_normalize_examples():
    img = np.zeros((1, 3, 32, 32))
    img[:, 0] = 128
    img[:, 1] = 255
    ds = Dataset(img, np.array([0]), 10)
    out = normalize(ds, np.array([128.0, 127.0, 0.0]))
    assert np.all(out.images[:, 0] == 0.0) and np.all(out.images[:, 1] == 1.0)
    with pytest.raises(DataError):
        normalize(ds)


def test_normalized_train_means_vanish():
    ds = synthetic_dataset(4, 30, seed=3).with_means()
    out = normalize(ds)
    assert np.abs(out.images.mean(axis=(0, 2, 3))).max() < 1e-9
    np.testing.assert_allclose(denormalize_images(out.images, ds.channel_means), ds.images, atol=1e-12)


def test_augment_center_offset_is_identity():
    img = np.random.default_rng(0).integers(0, 256, (3, 32, 32)).astype(float)
    assert np.array_equal(augment(img, AugmentPolicy(), offset=(4, 4), flip=False), img)


def test_augment_corner_offset_shifts():
    img = np.random.default_rng(1).integers(1, 256, (3, 32, 32)).astype(float)
    out = augment(img, AugmentPolicy(), offset=(0, 0), flip=False)
    assert np.all(out[:, :4, :] == 0) and np.all(out[:, :, :4] == 0)
    assert np.array_equal(out[:, 4:, 4:], img[:, :28, :28])


def test_augment_flip_involution():
    img = np.random.default_rng(2).normal(size=(3, 32, 32))
    pol = AugmentPolicy(pad=0)
    once = augment(img, pol, offset=(0, 0), flip=True)
    assert np.array_equal(once, img[:, :, ::-1])
    assert np.array_equal(augment(once, pol, offset=(0, 0), flip=True), img)


def test_augment_random_choices():
    img = np.ones((3, 32, 32))
    pol = AugmentPolicy()
    outs = [augment(img, pol, Rng(0).child(i)) for i in range(200)]
    assert all(o.shape == (3, 32, 32) for o in outs)
    shifted = sum(not np.array_equal(o, img) for o in outs)
    assert 150 < shifted < 200  # the (4, 4) offset is 1 of 81
    assert augment(img, AugmentPolicy(enabled=False), Rng(0)) is img
    with pytest.raises(DataError):
        augment(img, AugmentPolicy(pad=0, crop=(40, 40)), Rng(0))


def balanced(classes, per_class):
    labels = np.repeat(np.arange(classes), per_class)
    images = np.arange(len(labels), dtype=float)[:, None, None, None] * np.ones((1, 3, 32, 32))
    return Dataset(images, labels, classes)


def test_subset_stratified_counts():
    sub = subset_sample(balanced(10, 600), 10, 500, Rng(0))
    assert len(sub) == 5000
    assert np.bincount(sub.labels).tolist() == [500] * 10


def test_subset_deterministic_and_remapped():
    ds = balanced(10, 20)
    a = subset_sample(ds, 2, 5, Rng(4))
    b = subset_sample(ds, 2, 5, Rng(4))
    assert np.array_equal(a.source_indices, b.source_indices)
    assert set(a.labels.tolist()) == {0, 1} and a.num_classes == 2
    # remap preserves the ascending order of the original ids
    assert np.array_equal(ds.labels[a.source_indices], a.class_ids[a.labels])
    assert np.array_equal(a.images[:, 0, 0, 0], a.source_indices.astype(float))


def test_subset_errors_and_keep_all():
    ds = balanced(3, 4)
    with pytest.raises(DataError):
        subset_sample(ds, 3, 5, Rng(0))
    with pytest.raises(DataError):
        subset_sample(ds, 4, 1, Rng(0))
    assert len(subset_sample(ds, 2, 0, Rng(0), class_ids=[0, 2])) == 8


def test_synthetic_deterministic():
    a = synthetic_dataset(2, 100, seed=7)
    b = synthetic_dataset(2, 100, seed=7)
    assert len(a) == 200
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    test = synthetic_dataset(2, 100, seed=7, split="test")
    assert not np.array_equal(a.images, test.images)
    assert a.images.min() >= 0 and a.images.max() <= 255
    with pytest.raises(DataError):
        synthetic_dataset(1, 10, seed=0)
