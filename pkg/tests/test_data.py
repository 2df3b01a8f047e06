import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from advkit.data import (
    Dataset,
    desk_digits,
    load_dataset,
    read_cifar_batch,
    read_idx_images,
    read_idx_labels,
    write_cifar_batch,
    write_idx,
    write_idx_dataset,
)
from advkit.errors import CorruptFileError, InvalidArgumentError, InvalidShapeError


@settings(max_examples=25, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(0, 5), st.integers(1, 6), st.integers(1, 6))))
def test_idx_round_trip(tmp_path_factory, imgs):
    d = tmp_path_factory.mktemp("idx")
    labels = np.arange(len(imgs)) % 10
    write_idx(imgs, labels, d / "i", d / "l")
    np.testing.assert_array_equal(read_idx_images(d / "i")[:, 0], imgs)
    np.testing.assert_array_equal(read_idx_labels(d / "l"), labels)


def test_idx_bad_magic_and_truncation(tmp_path):
    imgs = np.zeros((2, 3, 3), dtype=np.uint8)
    write_idx(imgs, [1, 2], tmp_path / "i", tmp_path / "l")
    raw = (tmp_path / "i").read_bytes()
    (tmp_path / "bad").write_bytes(b"\0\0\x08\x01" + raw[4:])
    with pytest.raises(CorruptFileError):
        read_idx_images(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-1])
    with pytest.raises(CorruptFileError):
        read_idx_images(tmp_path / "short")


def test_cifar_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(4, 3, 32, 32), dtype=np.uint8)
    write_cifar_batch(imgs, [0, 9, 3, 3], tmp_path / "data_batch_1.bin")
    write_cifar_batch(imgs[:1], [5], tmp_path / "test_batch.bin")
    ds = load_dataset(tmp_path, "cifar", "train")
    np.testing.assert_array_equal(np.round(ds.images * 255).astype(np.uint8), imgs)
    assert list(ds.labels) == [0, 9, 3, 3]
    assert len(load_dataset(tmp_path, "cifar", "test")) == 1
    (tmp_path / "x.bin").write_bytes(b"\0" * 100)
    with pytest.raises(CorruptFileError):
        read_cifar_batch(tmp_path / "x.bin")


def test_missing_dataset_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nowhere"):
        load_dataset(tmp_path / "nowhere")
    with pytest.raises(FileNotFoundError, match="train-images"):
        load_dataset(tmp_path, "idx", "train")
    with pytest.raises(InvalidArgumentError):
        load_dataset(tmp_path, "png")


def test_dataset_validation():
    with pytest.raises(InvalidArgumentError):
        Dataset(np.full((1, 1, 2, 2), 1.5), [0])
    with pytest.raises(InvalidShapeError):
        Dataset(np.zeros((2, 2, 2)), [0, 1])
    with pytest.raises(InvalidShapeError):
        Dataset(np.zeros((2, 1, 2, 2)), [0])


def test_desk_digits_shape_and_idx_round_trip(tmp_path, digits):
    train, test = digits
    assert train.input_shape == (1, 28, 28)
    assert len(train) == 1438 and len(test) == 359
    assert set(np.unique(train.labels)) == set(range(10))
    write_idx_dataset(test, tmp_path, "test")
    back = load_dataset(tmp_path, "idx", "test")
    np.testing.assert_array_equal(back.images, test.images)
    np.testing.assert_array_equal(back.labels, test.labels)


def test_desk_digits_seeded():
    a, _ = desk_digits(seed=3)
    b, _ = desk_digits(seed=3)
    np.testing.assert_array_equal(a.labels, b.labels)
