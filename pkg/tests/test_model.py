import numpy as np
import pytest

from advkit import tensor as T
from advkit.data import Dataset
from advkit.errors import CorruptFileError, InvalidArgumentError, InvalidShapeError
from advkit.model import (
    Dense,
    Flatten,
    build_model,
    forward,
    linear_model,
    load_weights,
    save_weights,
    train,
    truncated_forward,
)


def tiny_ds(n=24, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(n, 1, 12, 12)).astype(np.float32)
    y = np.arange(n) % 3
    x[y == 1, :, :6] *= 0.2  # something learnable
    return Dataset(x, y)


@pytest.mark.parametrize("arch,shape", [("small-a", (1, 28, 28)), ("small-b", (3, 32, 32)), ("small-c", (1, 28, 28))])
def test_architectures_build_and_run(arch, shape):
    m = build_model(arch, shape, 10)
    x = np.zeros((2,) + shape, dtype=np.float32)
    logits, fm = forward(m, x)
    assert logits.shape == (2, 10)
    assert fm.shape == (2,) + m.feature_shape


def test_small_b_default_input_is_cifar():
    assert build_model("small-b").input_shape == (3, 32, 32)


def test_unknown_architecture():
    with pytest.raises(InvalidArgumentError):
        build_model("resnet", (1, 28, 28))


def test_feature_tap_matches_truncated_forward(tiny_model):
    x = np.random.default_rng(0).uniform(size=(3, 1, 12, 12)).astype(np.float32)
    _, fm = forward(tiny_model, x)
    np.testing.assert_array_equal(fm.data, truncated_forward(tiny_model, x, tiny_model.feature_tap_index).data)


def test_tap_must_be_spatial():
    with pytest.raises(InvalidShapeError):
        build_model("small-a", (1, 12, 12), 3, feature_tap_index=6)


def test_zero_dense_gives_uniform_softmax(tiny_model):
    last = max(k for k in tiny_model.params if k.endswith(".weight"))
    tiny_model.params[last].data[:] = 0
    tiny_model.params[last.replace("weight", "bias")].data[:] = 0
    x = np.random.default_rng(0).uniform(size=(2, 1, 12, 12)).astype(np.float32)
    p = T.softmax(tiny_model(x), axis=1).data
    np.testing.assert_allclose(p, 1 / 3, atol=1e-7)


def test_model_rejects_wrong_input_shape(tiny_model):
    with pytest.raises(InvalidShapeError):
        tiny_model(np.zeros((1, 1, 10, 12), dtype=np.float32))


def test_training_is_deterministic_and_lowers_loss():
    ds = tiny_ds()
    _, h1 = train(build_model("small-a", (1, 12, 12), 3, seed=2), ds, epochs=4, lr=5e-3, batch_size=8, seed=3)
    m2, h2 = train(build_model("small-a", (1, 12, 12), 3, seed=2), ds, epochs=4, lr=5e-3, batch_size=8, seed=3)
    assert h1.loss == h2.loss
    assert h1.loss[-1] < h1.loss[0]


def test_zero_epochs_leaves_weights():
    m = build_model("small-a", (1, 12, 12), 3, seed=0)
    before = {k: v.data.copy() for k, v in m.params.items()}
    m, h = train(m, tiny_ds(), epochs=0)
    assert h.loss == []
    for k, v in m.params.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_train_on_empty_dataset():
    empty = Dataset(np.zeros((0, 1, 12, 12)), np.zeros(0))
    with pytest.raises(InvalidArgumentError):
        train(build_model("small-a", (1, 12, 12), 3), empty, epochs=1)


def test_weights_round_trip(tmp_path, tiny_model):
    save_weights(tiny_model, tmp_path / "w")
    m = load_weights(tmp_path / "w")
    x = np.random.default_rng(0).uniform(size=(2, 1, 12, 12)).astype(np.float32)
    np.testing.assert_array_equal(m.logits(x), tiny_model.logits(x))
    assert m.name == "small-a" and m.feature_tap_index == tiny_model.feature_tap_index
    other = build_model("small-a", (1, 12, 12), 3, seed=9)
    load_weights(tmp_path / "w", other)
    np.testing.assert_array_equal(other.logits(x), tiny_model.logits(x))


def test_weights_into_other_architecture(tmp_path, tiny_model):
    save_weights(tiny_model, tmp_path / "w")
    with pytest.raises(InvalidShapeError):
        load_weights(tmp_path / "w", build_model("small-c", (1, 12, 12), 3))
    with pytest.raises(InvalidShapeError):
        load_weights(tmp_path / "w", build_model("small-a", (1, 12, 12), 4))


@pytest.mark.parametrize(
    "damage",
    [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + (7).to_bytes(4, "little") + b[8:],
        lambda b: b[:-5],
        lambda b: b + b"\0",
        lambda b: b[:20],
    ],
)
def test_corrupt_weight_files(tmp_path, tiny_model, damage):
    save_weights(tiny_model, tmp_path / "w")
    (tmp_path / "bad").write_bytes(damage((tmp_path / "w").read_bytes()))
    with pytest.raises(CorruptFileError):
        load_weights(tmp_path / "bad")


def test_linear_model():
    w = np.array([[1.0, 0, 0, 0], [0, 0, 0, 2.0]], dtype=np.float32).T
    m = linear_model(w, np.array([0.5, 0.0], dtype=np.float32), (1, 2, 2))
    x = np.array([[[[1.0, 0.0], [0.0, 1.0]]]], dtype=np.float32)
    np.testing.assert_allclose(m.logits(x), [[1.5, 2.0]])
    assert m.feature_tap_index is None
    assert isinstance(m.layers[0], Flatten) and isinstance(m.layers[1], Dense)
