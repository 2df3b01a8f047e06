import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from advkit.defenses import (
    DefenseConfig,
    apply_defense,
    defended_forward,
    gaussian_blur,
    gaussian_kernel,
    gaussian_kernel_2d,
    input_transform,
)
from advkit.errors import InvalidArgumentError
from advkit.model import build_model

unit = st.floats(0, 1, allow_nan=False)


def test_kernel_matches_analytic_gaussian():
    k = gaussian_kernel_2d(1.0, 3)
    off = np.array([-1.0, 0.0, 1.0])
    g = np.exp(-(off[:, None] ** 2 + off[None, :] ** 2) / 2)
    np.testing.assert_allclose(k, g / g.sum(), atol=1e-6)
    assert abs(k.sum() - 1) < 1e-7
    # centre weight of the classic sigma=1 3x3 kernel
    assert k[1, 1] == pytest.approx(0.2042, abs=1e-4)


@given(st.floats(0.1, 5), st.sampled_from([1, 3, 5, 7, 9]))
def test_kernel_normalised_and_symmetric(sigma, size):
    k = gaussian_kernel(sigma, size)
    assert abs(k.sum() - 1) < 1e-7
    np.testing.assert_allclose(k, k[::-1])


@pytest.mark.parametrize("bad", [dict(kernel_size=4), dict(kernel_size=0), dict(sigma=0.0), dict(transform_scale=0), dict(quantization_levels=1), dict(kind="jpeg")])
def test_config_validation(bad):
    with pytest.raises(InvalidArgumentError):
        DefenseConfig(**bad)


def test_even_kernel_in_function():
    with pytest.raises(InvalidArgumentError):
        gaussian_blur(np.zeros((1, 4, 4)), 1.0, 2)


@given(st.floats(0, 1), st.integers(3, 8))
def test_blur_keeps_constants(v, n):
    x = np.full((2, n, n), v)
    np.testing.assert_allclose(gaussian_blur(x), v, atol=1e-12)


@settings(max_examples=50)
@given(arrays(np.float64, (1, 6, 7), elements=unit))
def test_blur_preserves_mean_and_range(x):
    out = gaussian_blur(x, 1.0, 3)
    assert abs(out.mean() - x.mean()) < 1e-4
    assert out.min() >= 0 and out.max() <= 1


def test_blur_identity_kernel_and_not_idempotent():
    x = np.random.default_rng(0).uniform(size=(1, 5, 5))
    np.testing.assert_array_equal(gaussian_blur(x, 1.0, 1), x)
    once = gaussian_blur(x)
    assert not np.allclose(gaussian_blur(once), once)


def test_blur_batch_equals_per_image():
    x = np.random.default_rng(1).uniform(size=(3, 2, 6, 6))
    np.testing.assert_allclose(gaussian_blur(x), np.stack([gaussian_blur(i) for i in x]))


def test_transform_near_identity_bound():
    x = np.random.default_rng(2).uniform(size=(3, 9, 9))
    out = input_transform(x, DefenseConfig(kind="input_transform", transform_scale=1, quantization_levels=256))
    assert np.abs(out - x).max() <= 1 / 510 + 1e-12


def test_transform_checkerboard_loses_contrast():
    x = (np.indices((4, 4)).sum(0) % 2).astype(np.float64)[None]
    out = input_transform(x)
    assert out.max() - out.min() < x.max() - x.min()


@given(st.floats(0, 1), st.integers(2, 64))
def test_transform_constant_up_to_quantisation(v, levels):
    x = np.full((1, 6, 6), v)
    out = input_transform(x, DefenseConfig(kind="input_transform", quantization_levels=levels))
    assert np.abs(out - v).max() <= 0.5 / (levels - 1) + 1e-12
    assert np.ptp(out) == 0


@settings(max_examples=30)
@given(arrays(np.float64, (1, 5, 5), elements=unit))
def test_transform_range(x):
    out = input_transform(x)
    assert out.min() >= 0 and out.max() <= 1


def test_identity_defense_gives_undefended_logits():
    m = build_model("small-a", (1, 12, 12), 3)
    x = np.random.default_rng(0).uniform(size=(2, 1, 12, 12)).astype(np.float32)
    np.testing.assert_array_equal(defended_forward(m, DefenseConfig(kind="none"), x), m.logits(x))
    np.testing.assert_array_equal(defended_forward(m, None, x), m.logits(x))
    assert apply_defense(DefenseConfig(), x).dtype == np.float32
