"""Input filters placed in front of an unchanged classifier."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import InvalidArgumentError
from .model import Model

KINDS = ("none", "gaussian_blur", "input_transform")


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "gaussian_blur"
    sigma: float = 1.0
    kernel_size: int = 3
    transform_scale: int = 2
    quantization_levels: int = 32

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown defense {self.kind!r}; choose from {KINDS}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidArgumentError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if not self.sigma > 0:
            raise InvalidArgumentError(f"sigma must be > 0, got {self.sigma}")
        if self.transform_scale < 1:
            raise InvalidArgumentError(f"transform_scale must be >= 1, got {self.transform_scale}")
        if self.quantization_levels < 2:
            raise InvalidArgumentError("quantization_levels must be >= 2")

    @property
    def name(self):
        if self.kind == "gaussian_blur":
            return f"blur(s={self.sigma:g},k={self.kernel_size})"
        if self.kind == "input_transform":
            return f"transform(x{self.transform_scale},q={self.quantization_levels})"
        return "none"


def gaussian_kernel(sigma, kernel_size):
    """1-D normalised Gaussian taps at integer offsets around the centre."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise InvalidArgumentError(f"kernel_size must be odd and >= 1, got {kernel_size}")
    if not sigma > 0:
        raise InvalidArgumentError(f"sigma must be > 0, got {sigma}")
    r = kernel_size // 2
    off = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(off**2) / (2 * sigma**2))
    return k / k.sum()


def gaussian_kernel_2d(sigma, kernel_size):
    k = gaussian_kernel(sigma, kernel_size)
    return np.outer(k, k)


def gaussian_blur(x, sigma=1.0, kernel_size=3):
    """Separable per-channel Gaussian blur of ``[C,H,W]`` or ``[N,C,H,W]``.

    Borders are padded by mirroring with the edge pixel repeated
    (``dcba|abcd``), which keeps the image mean unchanged for kernels
    no wider than the image.
    """
    x = np.asarray(x)
    k = gaussian_kernel(sigma, kernel_size)
    r = kernel_size // 2
    if r == 0:
        return x.copy()
    pad = [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)]
    xp = np.pad(x.astype(np.float64), pad, mode="symmetric")
    h, w = x.shape[-2:]
    rows = sum(k[i] * xp[..., i : i + h, :] for i in range(kernel_size))
    out = sum(k[j] * rows[..., :, j : j + w] for j in range(kernel_size))
    return np.clip(out, 0.0, 1.0).astype(x.dtype)


def input_transform(x, cfg: DefenseConfig | None = None):
    """Bilinear down/up-sampling by ``transform_scale`` then uniform quantisation."""
    cfg = cfg or DefenseConfig(kind="input_transform")
    x = np.asarray(x)
    h, w = x.shape[-2:]
    s = cfg.transform_scale
    with T.no_grad():
        small = T.bilinear_resize(T.Tensor(x, dtype=np.float64), (max(1, round(h / s)), max(1, round(w / s))))
        back = T.bilinear_resize(small, (h, w)).data
    q = cfg.quantization_levels - 1
    return (np.round(np.clip(back, 0, 1) * q) / q).astype(x.dtype)


def apply_defense(cfg: DefenseConfig | None, x):
    if cfg is None or cfg.kind == "none":
        return np.asarray(x)
    if cfg.kind == "gaussian_blur":
        return gaussian_blur(x, cfg.sigma, cfg.kernel_size)
    return input_transform(x, cfg)


def defended_forward(model: Model, defense: DefenseConfig | None, x):
    """Logits of ``model`` on the filtered input (no graph is recorded)."""
    return model.logits(apply_defense(defense, x))


def defended_predict(model: Model, defense: DefenseConfig | None, x):
    return model.predict(apply_defense(defense, x))
