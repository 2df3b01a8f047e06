import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from advkit import tensor as T
from advkit.attention import (
    attention_map,
    channel_attention,
    compute_attention,
    map_to_pgm,
    pixel_attention,
    shape_perturbation,
)
from advkit.errors import InvalidShapeError, ZeroGradientError
from advkit.metrics import read_pnm


def loop_attention(image, fm):
    """Scalar-loop oracle for the channel -> pixel -> map pipeline."""
    C, H, W = image.shape
    c = fm.shape[0]
    l = H * W
    I = [[float(image[k, p // W, p % W]) for p in range(l)] for k in range(C)]
    F = [[float(fm[j, p // W, p % W]) for p in range(l)] for j in range(c)]
    wc = []
    for k in range(C):
        raw = [sum(I[k][p] * F[j][p] for p in range(l)) for j in range(c)]
        m = max(raw)
        e = [math.exp(r - m) for r in raw]
        wc.append([v / sum(e) for v in e])
    scores = []
    for p in range(l):
        s = 0.0
        for k in range(C):
            s += sum(wc[k][j] * F[j][p] for j in range(c)) * I[k][p]
        scores.append(s)
    m = max(scores)
    e = [math.exp(s - m) for s in scores]
    wp = [v / sum(e) for v in e]
    wmap = [[wp[i * W + j] for j in range(W)] for i in range(H)]
    return np.array(wc), np.array(wp), np.array(wmap)


def t64(a):
    return T.Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def test_channel_attention_worked_example():
    img = t64(np.array([2.0, 0, 0]).reshape(3, 1, 1))
    fm = t64(np.array([1.0, 3.0]).reshape(2, 1, 1))
    wc = channel_attention(img, fm).data
    np.testing.assert_allclose(wc, [[0.0180, 0.9820], [0.5, 0.5], [0.5, 0.5]], atol=1e-3)


def test_pixel_attention_worked_example():
    img = t64([[[1.0, 0.0], [0.0, 0.0]]])
    fm = t64(np.ones((1, 2, 2)))
    wc = channel_attention(img, fm)
    wp_t = pixel_attention(wc, fm, img)
    wp = wp_t.data
    np.testing.assert_allclose(wp, [[0.4755, 0.1748, 0.1748, 0.1748]], atol=1e-3)
    wmap = attention_map(wp_t, 2, 2).data
    assert wmap[0, 0, 0] == wp[0, 0]
    np.testing.assert_array_equal(wmap.reshape(-1), wp.reshape(-1))
    grad = t64(np.ones((1, 2, 2)))
    np.testing.assert_allclose(shape_perturbation(grad, t64(wmap)).data, wmap / 4)


def test_uniform_cases():
    fm = t64(np.full((3, 2, 2), 0.7))
    img = t64(np.random.default_rng(0).uniform(size=(2, 2, 2)))
    np.testing.assert_allclose(channel_attention(img, fm).data, 1 / 3)
    black = t64(np.zeros((2, 2, 2)))
    fm2 = t64(np.random.default_rng(1).uniform(size=(3, 2, 2)))
    np.testing.assert_allclose(channel_attention(black, fm2).data, 1 / 3)
    wc = channel_attention(black, fm2)
    np.testing.assert_allclose(pixel_attention(wc, fm2, black).data, 1 / 4)
    one = t64(np.ones((1, 1, 1)))
    assert pixel_attention(channel_attention(one, one), one, one).data.tolist() == [[1.0]]


def test_shape_errors():
    with pytest.raises(InvalidShapeError):
        channel_attention(t64(np.ones((1, 2, 2))), t64(np.ones((1, 3, 3))))
    with pytest.raises(InvalidShapeError):
        pixel_attention(t64(np.ones((2, 2))), t64(np.ones((1, 2, 2))), t64(np.ones((1, 2, 2))))
    with pytest.raises(InvalidShapeError):
        attention_map(t64(np.ones((1, 5))), 2, 2)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 2),
    st.integers(0, 2**31 - 1),
)
def test_pipeline_matches_scalar_loop(C, H, W, c, seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(C, H, W))
    fm = rng.uniform(0, 3, size=(c, H, W))
    wc_ref, wp_ref, map_ref = loop_attention(img, fm)
    wc = channel_attention(t64(img), t64(fm))
    wp = pixel_attention(wc, t64(fm), t64(img))
    np.testing.assert_allclose(wc.data, wc_ref, atol=1e-9)
    np.testing.assert_allclose(wp.data[0], wp_ref, atol=1e-9)
    np.testing.assert_allclose(attention_map(wp, H, W).data[0], map_ref, atol=1e-9)


def test_compute_attention_upsamples():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(1, 8, 8))
    att = compute_attention(t64(img), t64(rng.uniform(size=(2, 3, 3))))
    assert att.channel.shape == (1, 2) and att.pixel.shape == (1, 64) and att.map.shape == (1, 8, 8)
    assert att.map.data.sum() == pytest.approx(1.0)


@given(arrays(np.float64, (2, 3, 3), elements=st.floats(-10, 10)))
def test_shape_perturbation_bound(grad):
    if np.abs(grad).sum() == 0:
        with pytest.raises(ZeroGradientError):
            shape_perturbation(t64(grad), t64(np.full((1, 3, 3), 1 / 9)))
        return
    w = np.random.default_rng(0).dirichlet(np.ones(9)).reshape(1, 3, 3)
    out = shape_perturbation(t64(grad), t64(w)).data
    assert np.abs(out).sum() <= w.max() + 1e-12
    uniform = shape_perturbation(t64(grad), t64(np.full((1, 3, 3), 1 / 9))).data
    np.testing.assert_allclose(uniform, grad / np.abs(grad).sum() / 9)


def test_zero_map_pixel_annihilates_all_channels():
    w = np.full((1, 2, 2), 1 / 3)
    w[0, 1, 1] = 0
    out = shape_perturbation(t64(np.ones((3, 2, 2))), t64(w)).data
    assert np.all(out[:, 1, 1] == 0) and np.all(out[:, 0, 0] > 0)


def test_positive_scaling_keeps_argmax_on_monotone_fixture():
    img = t64(np.linspace(0, 1, 9).reshape(1, 3, 3))
    fm = np.linspace(0.1, 1, 9).reshape(1, 3, 3)
    a = pixel_attention(channel_attention(img, t64(fm)), t64(fm), img).data
    b = pixel_attention(channel_attention(img, t64(fm * 3)), t64(fm * 3), img).data
    assert np.argmax(a) == np.argmax(b) == 8


def test_map_to_pgm(tmp_path):
    w = np.arange(6, dtype=np.float64).reshape(1, 2, 3)
    map_to_pgm(w, tmp_path / "m.pgm")
    img = read_pnm(tmp_path / "m.pgm")
    assert img.shape == (2, 3) and img.min() == 0 and img.max() == 255
