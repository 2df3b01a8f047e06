"""Channel and pixel spatial attention over a shallow feature map.

Shapes, with ``l = H*W``:

* image ``[C_in,H,W]`` is read as a ``[C_in, l]`` matrix,
* upsampled features ``[c,H,W]`` as ``[c, l]``,
* channel attention ``[C_in, c]``: each row is a softmax over feature channels,
* pixel attention ``[1, l]``: a softmax over pixel positions,
* attention map ``[1,H,W]``: pixel attention in row-major spatial layout.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import InvalidShapeError, ZeroGradientError
from .tensor import Tensor


class Attention(NamedTuple):
    channel: Tensor  # [C_in, c]
    pixel: Tensor  # [1, l]
    map: Tensor  # [1, H, W]


def _flat(x: Tensor):
    return T.reshape(x, (x.shape[0], x.shape[1] * x.shape[2]))


def _check_pair(image: Tensor, fm_up: Tensor):
    if image.ndim != 3 or fm_up.ndim != 3:
        raise InvalidShapeError(f"need [C,H,W] tensors, got {image.shape} and {fm_up.shape}")
    if image.shape[1:] != fm_up.shape[1:]:
        raise InvalidShapeError(
            f"feature map {fm_up.shape[1:]} not upsampled to image size {image.shape[1:]}"
        )


def channel_attention(image, fm_up) -> Tensor:
    """Row-softmax of ``image_flat @ features_flat.T``; shape ``[C_in, c]``."""
    image, fm_up = T.as_tensor(image), T.as_tensor(fm_up)
    _check_pair(image, fm_up)
    return T.softmax(T.matmul(_flat(image), T.transpose(_flat(fm_up))), axis=1)


def pixel_attention(w_c, fm_up, image) -> Tensor:
    """Softmax over pixels of ``colsum((w_c @ features_flat) * image_flat)``."""
    w_c, fm_up, image = T.as_tensor(w_c), T.as_tensor(fm_up), T.as_tensor(image)
    _check_pair(image, fm_up)
    if w_c.shape != (image.shape[0], fm_up.shape[0]):
        raise InvalidShapeError(
            f"channel attention {w_c.shape} does not match ({image.shape[0]}, {fm_up.shape[0]})"
        )
    reweighted = T.matmul(w_c, _flat(fm_up))  # [C_in, l]
    scores = T.tsum(reweighted * _flat(image), axis=0, keepdims=True)  # [1, l]
    return T.softmax(scores, axis=1)


def attention_map(w_p, H: int, W: int) -> Tensor:
    w_p = T.as_tensor(w_p)
    if w_p.size != H * W:
        raise InvalidShapeError(f"pixel attention has {w_p.size} entries, expected {H}*{W}")
    return T.reshape(w_p, (1, H, W))


def compute_attention(image, feature_map) -> Attention:
    """Full pipeline from a clean image and a raw tap activation ``[c,h,w]``."""
    image = T.as_tensor(image)
    H, W = image.shape[1:]
    fm_up = T.bilinear_upsample(feature_map, (H, W))
    w_c = channel_attention(image, fm_up)
    w_p = pixel_attention(w_c, fm_up, image)
    return Attention(w_c, w_p, attention_map(w_p, H, W))


def shape_perturbation(grad, w_map) -> Tensor:
    """L1-normalised gradient weighted pixelwise by the attention map.

    The single-channel map is shared by every input channel.
    """
    grad, w_map = T.as_tensor(grad), T.as_tensor(w_map)
    if grad.ndim != 3 or w_map.shape != (1,) + grad.shape[1:]:
        raise InvalidShapeError(f"gradient {grad.shape} and map {w_map.shape} disagree")
    norm = T.l1_norm(grad)
    if not norm.item() > 0:
        raise ZeroGradientError("gradient has zero L1 norm")
    return T.expand(w_map, grad.shape) * (grad / norm)


def map_to_pgm(w_map, path):
    """Write an attention map as an 8-bit PGM, min-max normalised."""
    from .metrics import write_pgm

    m = np.asarray(T.as_tensor(w_map).data, dtype=np.float64).reshape(w_map.shape[-2:])
    lo, hi = m.min(), m.max()
    scaled = np.zeros_like(m) if hi <= lo else (m - lo) / (hi - lo)
    write_pgm(np.round(scaled * 255).astype(np.uint8), path)
