"""Small CNN classifiers with a shallow feature tap, training and weight files."""
from __future__ import annotations

import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import (
    CorruptFileError,
    InvalidArgumentError,
    InvalidShapeError,
    TrainingFailureError,
)
from .tensor import Tensor

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# layer descriptors
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Conv:
    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    kind: str = "conv"


@dataclass(frozen=True)
class ReLU:
    kind: str = "relu"


@dataclass(frozen=True)
class MaxPool:
    size: int = 2
    kind: str = "maxpool"


@dataclass(frozen=True)
class Flatten:
    kind: str = "flatten"


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    kind: str = "dense"


LAYER_TYPES = {"conv": Conv, "relu": ReLU, "maxpool": MaxPool, "flatten": Flatten, "dense": Dense}


def _layer_from_dict(d):
    d = dict(d)
    return LAYER_TYPES[d["kind"]](**d)


def output_shape(layer, shape):
    """Per-example output shape of ``layer`` given per-example input ``shape``."""
    if isinstance(layer, Conv):
        c, h, w = shape
        if c != layer.in_ch:
            raise InvalidShapeError(f"conv expects {layer.in_ch} channels, got {c}")
        ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        return (layer.out_ch, ho, wo)
    if isinstance(layer, MaxPool):
        c, h, w = shape
        return (c, h // layer.size, w // layer.size)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Dense):
        if shape != (layer.in_features,):
            raise InvalidShapeError(f"dense expects ({layer.in_features},), got {shape}")
        return (layer.out_features,)
    return shape


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------
@dataclass
class Model:
    name: str
    layers: list
    params: dict
    feature_tap_index: int | None
    input_shape: tuple
    num_classes: int
    shapes: list = field(init=False, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        shape, self.shapes = self.input_shape, []
        for layer in self.layers:
            shape = output_shape(layer, shape)
            self.shapes.append(shape)
        if self.shapes[-1] != (self.num_classes,):
            raise InvalidShapeError(f"network ends in {self.shapes[-1]}, expected ({self.num_classes},)")
        if self.feature_tap_index is not None and len(self.shapes[self.feature_tap_index]) != 3:
            raise InvalidShapeError(
                f"feature tap {self.feature_tap_index} yields non-spatial shape "
                f"{self.shapes[self.feature_tap_index]}"
            )

    @property
    def feature_shape(self):
        return None if self.feature_tap_index is None else self.shapes[self.feature_tap_index]

    def parameters(self):
        return [self.params[k] for k in sorted(self.params)]

    def __call__(self, x):
        return forward(self, x)[0]

    def predict(self, images, batch_size=256):
        """Class predictions for a numpy batch, without recording a graph."""
        images = np.asarray(images)
        out = []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(np.argmax(forward(self, images[i : i + batch_size])[0].data, axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def logits(self, images):
        with T.no_grad():
            return forward(self, images)[0].data


def _apply(model, i, layer, h):
    if isinstance(layer, Conv):
        return T.conv2d(h, model.params[f"{i}.weight"], model.params[f"{i}.bias"], layer.stride, layer.padding)
    if isinstance(layer, ReLU):
        return T.relu(h)
    if isinstance(layer, MaxPool):
        return T.max_pool2d(h, layer.size)
    if isinstance(layer, Flatten):
        return T.flatten(h)
    if isinstance(layer, Dense):
        return T.linear(h, model.params[f"{i}.weight"], model.params[f"{i}.bias"])
    raise InvalidArgumentError(f"unknown layer {layer!r}")


def forward(model: Model, x, stop=None):
    """Run the network on ``[N,C,H,W]`` input.

    Returns ``(logits, feature_map)`` where the feature map is the activation
    of ``model.feature_tap_index`` from the same pass (``None`` without a tap).
    With ``stop=k`` the pass ends after layer ``k`` and that activation is
    returned instead.
    """
    x = T.as_tensor(x, model.parameters()[0].dtype if model.params else None)
    if x.ndim != 4 or tuple(x.shape[1:]) != model.input_shape:
        raise InvalidShapeError(f"model expects [N,{model.input_shape}], got {x.shape}")
    h, fm = x, None
    for i, layer in enumerate(model.layers):
        h = _apply(model, i, layer, h)
        if i == model.feature_tap_index:
            fm = h
        if stop is not None and i == stop:
            return h
    return h, fm


def truncated_forward(model: Model, x, index):
    return forward(model, x, stop=index)


# ---------------------------------------------------------------------------
# reference architectures
# ---------------------------------------------------------------------------
def _conv_stack(input_shape, num_classes, blocks, padding, hidden=None):
    layers = []
    c = input_shape[0]
    for out in blocks:
        layers += [Conv(c, out, 3, 1, padding), ReLU(), MaxPool(2)]
        c = out
    layers.append(Flatten())
    shape = input_shape
    for layer in layers:
        shape = output_shape(layer, shape)
    n = shape[0]
    if hidden:
        layers += [Dense(n, hidden), ReLU()]
        n = hidden
    layers.append(Dense(n, num_classes))
    return layers


def _small_a(input_shape, num_classes):
    return _conv_stack(input_shape, num_classes, (16, 32), padding=0)


def _small_b(input_shape, num_classes):
    return _conv_stack(input_shape, num_classes, (8, 16, 32), padding=1)


def _small_c(input_shape, num_classes):
    c = input_shape[0]
    layers = [
        Conv(c, 16, 3, 1, 1), ReLU(), Conv(16, 16, 3, 1, 1), ReLU(), MaxPool(2),
        Conv(16, 32, 3, 1, 1), ReLU(), Conv(32, 32, 3, 1, 1), ReLU(), MaxPool(2),
        Flatten(),
    ]
    shape = tuple(input_shape)
    for layer in layers:
        shape = output_shape(layer, shape)
    return layers + [Dense(shape[0], 64), ReLU(), Dense(64, num_classes)]


ARCHITECTURES = {
    "small-a": (_small_a, (1, 28, 28)),
    "small-b": (_small_b, (3, 32, 32)),
    "small-c": (_small_c, (3, 32, 32)),
}


def init_params(layers, seed=0, dtype=np.float32):
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv):
            fan_in = layer.in_ch * layer.kernel**2
            w = rng.normal(0, math.sqrt(2 / fan_in), (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel))
            params[f"{i}.weight"] = Tensor(w, requires_grad=True, dtype=dtype)
            params[f"{i}.bias"] = Tensor(np.zeros(layer.out_ch), requires_grad=True, dtype=dtype)
        elif isinstance(layer, Dense):
            w = rng.normal(0, math.sqrt(2 / layer.in_features), (layer.in_features, layer.out_features))
            params[f"{i}.weight"] = Tensor(w, requires_grad=True, dtype=dtype)
            params[f"{i}.bias"] = Tensor(np.zeros(layer.out_features), requires_grad=True, dtype=dtype)
    return params


def build_model(arch="small-a", input_shape=None, num_classes=10, seed=0, feature_tap_index=None, dtype=None):
    """Instantiate a reference architecture.

    The default tap is the output of the first conv+ReLU block.
    """
    if arch not in ARCHITECTURES:
        raise InvalidArgumentError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    make, default_shape = ARCHITECTURES[arch]
    input_shape = tuple(input_shape or default_shape)
    layers = make(input_shape, num_classes)
    if feature_tap_index is None:
        feature_tap_index = next(i for i, l in enumerate(layers) if isinstance(l, ReLU))
    params = init_params(layers, seed, dtype or T.default_dtype())
    return Model(arch, layers, params, feature_tap_index, input_shape, num_classes)


def linear_model(weight, bias, input_shape):
    """A flatten+dense classifier with given ``[n_in, K]`` weights (no feature tap)."""
    weight = np.asarray(weight)
    layers = [Flatten(), Dense(weight.shape[0], weight.shape[1])]
    params = {
        "1.weight": Tensor(weight, requires_grad=True, dtype=weight.dtype),
        "1.bias": Tensor(np.asarray(bias), requires_grad=True, dtype=weight.dtype),
    }
    return Model("linear", layers, params, None, tuple(input_shape), weight.shape[1])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------
@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)


def accuracy(model: Model, ds: Dataset) -> float:
    return float(np.mean(model.predict(ds.images) == ds.labels)) if len(ds) else 0.0


def train(model: Model, dataset: Dataset, epochs=8, lr=2e-3, batch_size=32, seed=0, callback=None):
    """Minibatch Adam on softmax cross-entropy; updates ``model`` in place.

    Deterministic given ``seed`` (which drives the shuffling only; weights
    come from ``build_model``).  Returns the model and a :class:`TrainHistory`
    of per-epoch mean loss and training accuracy.
    """
    if len(dataset) == 0:
        raise InvalidArgumentError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    opt = T.Adam(model.parameters(), lr=lr)
    hist = TrainHistory()
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        total, correct = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            xb, yb = dataset.images[idx], dataset.labels[idx]
            logits, _ = forward(model, xb)
            loss = T.cross_entropy(logits, yb)
            if not np.isfinite(loss.data):
                raise TrainingFailureError(epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
        hist.loss.append(total / len(dataset))
        hist.accuracy.append(correct / len(dataset))
        log.info("epoch %d loss %.4f acc %.4f", epoch, hist.loss[-1], hist.accuracy[-1])
        if callback:
            callback(epoch, hist)
    return model, hist


# ---------------------------------------------------------------------------
# weight files
# ---------------------------------------------------------------------------
WEIGHTS_MAGIC = b"ADVW"
WEIGHTS_VERSION = 1


def save_weights(model: Model, path):
    header = {
        "name": model.name,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "feature_tap_index": model.feature_tap_index,
        "layers": [asdict(l) for l in model.layers],
        "tensors": sorted(model.params),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    blob = WEIGHTS_MAGIC + struct.pack("<II", WEIGHTS_VERSION, len(hb)) + hb
    blob += b"".join(T.tensor_to_bytes(model.params[k]) for k in header["tensors"])
    atomic_write_bytes(path, blob)


def atomic_write_bytes(path, blob: bytes):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_weights(path, model: Model | None = None) -> Model:
    """Load a weight file.

    Without ``model`` a fresh model is rebuilt from the stored layer list.
    With ``model`` the tensors are copied into it, and any name or shape
    disagreement raises :class:`InvalidShapeError`.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != WEIGHTS_MAGIC:
        raise CorruptFileError(f"{path}: not a weight file")
    try:
        version, hlen = struct.unpack_from("<II", buf, 4)
        if version != WEIGHTS_VERSION:
            raise CorruptFileError(f"{path}: unsupported weight-file version {version}")
        header = json.loads(buf[12 : 12 + hlen].decode())
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFileError(f"{path}: damaged header ({e})") from None
    offset = 12 + hlen
    tensors = {}
    for name in header["tensors"]:
        t, offset = T.tensor_from_bytes(buf, offset)
        tensors[name] = t
    if offset != len(buf):
        raise CorruptFileError(f"{path}: trailing bytes")
    if model is None:
        layers = [_layer_from_dict(d) for d in header["layers"]]
        for t in tensors.values():
            t.requires_grad = True
        return Model(
            header["name"], layers, tensors, header["feature_tap_index"], tuple(header["input_shape"]), header["num_classes"]
        )
    if sorted(model.params) != sorted(tensors):
        raise InvalidShapeError(f"{path}: parameter names do not match model {model.name!r}")
    for k, t in tensors.items():
        if model.params[k].shape != t.shape:
            raise InvalidShapeError(f"{path}: {k} has shape {t.shape}, model expects {model.params[k].shape}")
    for k, t in tensors.items():
        model.params[k].data = t.data.astype(model.params[k].dtype)
    return model
