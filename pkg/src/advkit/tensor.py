"""N-D tensors over numpy with reverse-mode automatic differentiation.

Every differentiable operation produces a ``Tensor`` that remembers a
``_Node``: the parents it was computed from and a closure mapping the output
adjoint to one adjoint per parent.  ``backward`` sorts the reachable nodes into
a :class:`Tape` (a topological order of the recorded operations) and replays it
in reverse.

Broadcasting is deliberately restricted to scalar-with-tensor and equal-shape
operands; anything else raises :class:`InvalidShapeError`.  Use :func:`expand`
when a broadcast is really wanted.
"""
from __future__ import annotations

import contextlib
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    CorruptFileError,
    InvalidArgumentError,
    InvalidShapeError,
    StateError,
)

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype():
    return _get("dtype", np.float32)


def set_default_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise InvalidArgumentError(f"unsupported dtype {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (``float64`` for gradient checks)."""
    old = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


def is_grad_enabled():
    return _get("grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    old = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class _Node:
    __slots__ = ("op", "parents", "backward_fn", "consumed")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or default_dtype()
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _not_scalar(self)

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- autograd ------------------------------------------------------
    def backward(self):
        backward(self)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)


def _not_scalar(t):
    raise InvalidArgumentError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(op, tuple(parents), backward_fn)
    return out


# ----------------------------------------------------------------------
# tape & backward
# ----------------------------------------------------------------------
@dataclass
class Tape:
    """Operations reachable from a loss, in the order they were executed.

    ``entries`` is a topological order (inputs before outputs), so walking it
    backwards visits every node after all of its consumers.
    """

    loss: Tensor
    entries: list = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                if t._node.consumed:
                    raise StateError(
                        "backward through a graph that was already consumed; "
                        "recompute the forward pass"
                    )
                for p in reversed(t._node.parents):
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(loss, order)

    def gradients(self, retain=False) -> dict:
        """Replay adjoints in reverse order; returns ``{id(tensor): grad}``."""
        adj = {id(self.loss): np.ones_like(self.loss.data)}
        for t in reversed(self.entries):
            g = adj.get(id(t))
            node = t._node
            if g is None or node is None:
                continue
            if node.consumed:
                raise StateError("tape already consumed")
            grads = node.backward_fn(g)
            for p, pg in zip(node.parents, grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=p.data.dtype).reshape(p.shape)
                if id(p) in adj:
                    adj[id(p)] = adj[id(p)] + pg
                else:
                    adj[id(p)] = pg
            if not retain:
                node.consumed = True
                node.backward_fn = None
        return adj


def backward(loss: Tensor):
    """Populate ``.grad`` of every requires-grad tensor the loss depends on.

    Leaf gradients accumulate across calls (call ``zero_grad`` to reset);
    each recorded graph can be back-propagated exactly once.
    """
    if not isinstance(loss, Tensor):
        raise InvalidArgumentError("backward expects a Tensor")
    if loss.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise InvalidArgumentError("loss does not depend on any tensor requiring grad")
    tape = Tape.from_loss(loss)
    adj = tape.gradients()
    for t in tape.entries:
        g = adj.get(id(t))
        if g is None:
            continue
        if t._node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
        else:
            t.grad = g


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------
def _operands(a, b):
    dt = None
    if isinstance(a, Tensor):
        dt = a.dtype
    elif isinstance(b, Tensor):
        dt = b.dtype
    a = as_tensor(a, dt)
    b = as_tensor(b, dt)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise InvalidShapeError(f"incompatible shapes {a.shape} and {b.shape}")
    if a.size == 1 and b.size == 1 and a.shape != b.shape:
        # both scalar-like: keep the higher-rank shape
        if a.ndim < b.ndim:
            a = reshape(a, b.shape)
        else:
            b = reshape(b, a.shape)
    return a, b


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b):
    a, b = _operands(a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b):
    a, b = _operands(a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b):
    a, b = _operands(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b):
    a, b = _operands(a, b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
        "div",
    )


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sign(a):
    """Elementwise sign; its gradient is defined as identically zero."""
    a = as_tensor(a)
    return _make(np.sign(a.data), (a,), lambda g: (np.zeros_like(g),), "sign")


def abs(a):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def clamp(a, lo=None, hi=None):
    """Clip to ``[lo, hi]``; zero gradient where the bound is active."""
    a = as_tensor(a)
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    if lo_ > hi_:
        raise InvalidArgumentError(f"clamp bounds inverted: {lo} > {hi}")
    inside = (a.data >= lo_) & (a.data <= hi_)
    return _make(np.clip(a.data, lo_, hi_), (a,), lambda g: (g * inside,), "clamp")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


# ----------------------------------------------------------------------
# shape manipulation
# ----------------------------------------------------------------------
def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise InvalidShapeError(str(e)) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a):
    """Collapse all but the leading (batch) axis."""
    return reshape(a, (a.shape[0], -1))


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose"
    )


def expand(a, shape):
    """Explicit broadcast of ``a`` to ``shape`` (numpy rules)."""
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise InvalidShapeError(str(e)) from None

    def bw(g):
        lead = g.ndim - a.ndim
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(a.shape) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _make(np.ascontiguousarray(out), (a,), bw, "expand")


def pick(a, index):
    """``out[n] = a[n, index[n]]`` for a 2-D ``a``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if a.ndim != 2 or len(index) != a.shape[0]:
        raise InvalidShapeError(f"pick needs [N,K] and N indices, got {a.shape}, {index.shape}")
    rows = np.arange(a.shape[0])

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[rows, index] = g
        return (ga,)

    return _make(a.data[rows, index], (a,), bw, "pick")


# ----------------------------------------------------------------------
# reductions and norms
# ----------------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise InvalidArgumentError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a):
    a = as_tensor(a)
    return tsum(a) * (1.0 / a.size)


def tmax(a, axis):
    """Maximum along one axis; the adjoint goes to the first maximal entry."""
    a = as_tensor(a)
    (ax,) = _norm_axis(axis, a.ndim)
    idx = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), ax).squeeze(ax)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, ax), np.expand_dims(g, ax), ax)
        return (ga,)

    return _make(out, (a,), bw, "max")


def l1_norm(a):
    return tsum(abs(a))


def l2_norm(a):
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data.astype(np.float64) ** 2)).astype(a.dtype)

    def bw(g):
        if n == 0:
            return (np.zeros_like(a.data),)
        return (g * a.data / n,)

    return _make(np.asarray(n), (a,), bw, "l2_norm")


def linf_norm(a):
    a = as_tensor(a)
    flat = np.abs(a.data).reshape(-1)
    if flat.size == 0:
        return Tensor(0.0, dtype=a.dtype)
    i = int(np.argmax(flat))

    def bw(g):
        ga = np.zeros(a.size, dtype=a.dtype)
        ga[i] = g * np.sign(a.data.reshape(-1)[i])
        return (ga.reshape(a.shape),)

    return _make(np.asarray(flat[i]), (a,), bw, "linf_norm")


# ----------------------------------------------------------------------
# linear algebra / softmax
# ----------------------------------------------------------------------
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _make(
        a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul"
    )


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``bias`` broadcast over rows."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise InvalidShapeError(f"linear shape mismatch {x.shape} @ {weight.shape}")
    parents = [x, weight]
    out = x.data @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise InvalidShapeError(f"bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        grads = [g @ weight.data.T, x.data.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _make(out, parents, bw, "linear")


def softmax(x, axis=-1):
    x = as_tensor(x)
    (ax,) = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    (ax,) = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=ax, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def cross_entropy(logits, labels, reduction="mean"):
    """Softmax cross-entropy of ``[N,K]`` logits against integer labels."""
    nll = -pick(log_softmax(logits, axis=1), labels)
    if reduction == "mean":
        return mean(nll)
    if reduction == "sum":
        return tsum(nll)
    if reduction == "none":
        return nll
    raise InvalidArgumentError(f"unknown reduction {reduction!r}")


# ----------------------------------------------------------------------
# convolution / pooling / resampling
# ----------------------------------------------------------------------
def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of ``[N,C,H,W]`` input with ``[F,C,kh,kw]`` kernels."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise InvalidShapeError(f"conv2d needs 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise InvalidShapeError(f"input has {c} channels but kernel expects {kc}")
    if stride < 1 or padding < 0:
        raise InvalidArgumentError(f"bad stride/padding {stride}/{padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise InvalidShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    k = kernel.data

    def window(arr, i, j):
        return arr[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]

    out = np.zeros((n, f, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            # [N,C,ho,wo] x [F,C] -> [N,ho,wo,F]
            out += np.tensordot(window(xp, i, j), k[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (f,):
            raise InvalidShapeError(f"bias shape {bias.shape} != ({f},)")
        out += bias.data[None, :, None, None]
        parents.append(bias)

    def bw(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gk = np.zeros_like(k) if kernel.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                if gk is not None:
                    gk[:, :, i, j] = np.tensordot(g, window(xp, i, j), axes=([0, 2, 3], [0, 2, 3]))
                if gxp is not None:
                    window(gxp, i, j)[...] += np.tensordot(g, k[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, parents, bw, "conv2d")


def max_pool2d(x, size=2):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise InvalidShapeError(f"max_pool2d needs [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise InvalidShapeError(f"pool size {size} larger than input {h}x{w}")
    crop = x.data[:, :, : ho * size, : wo * size]
    win = crop.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], -1)[..., 0]

    def bw(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], -1)
        gw = gw.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
        gx = np.zeros_like(x.data)
        gx[:, :, : ho * size, : wo * size] = gw
        return (gx,)

    return _make(out, (x,), bw, "max_pool2d")


def _interp_matrix(src, dst, dtype):
    """Rows map ``dst`` output samples onto ``src`` inputs (half-pixel centres)."""
    m = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for d in range(dst):
        s = min(max((d + 0.5) * scale - 0.5, 0.0), src - 1)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, src - 1)
        t = s - i0
        m[d, i0] += 1 - t
        m[d, i1] += t
    return m.astype(dtype)


def bilinear_resize(x, size):
    """Bilinear resampling of the last two axes to ``size = (H, W)``."""
    x = as_tensor(x)
    H, W = size
    if H < 1 or W < 1:
        raise InvalidArgumentError(f"target size must be positive, got {size}")
    if x.ndim < 2:
        raise InvalidShapeError(f"need at least 2 axes, got {x.shape}")
    h, w = x.shape[-2:]
    if (h, w) == (H, W):
        return _make(x.data.copy(), (x,), lambda g: (g,), "resize")
    ah = _interp_matrix(h, H, x.dtype)
    aw = _interp_matrix(w, W, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)
    return _make(out, (x,), lambda g: (np.matmul(np.matmul(ah.T, g), aw),), "resize")


def bilinear_upsample(fm, target):
    """Upsample ``[..., h, w]`` feature maps to ``target = (H, W)``, ``H >= h``, ``W >= w``."""
    fm = as_tensor(fm)
    H, W = target
    if H < 1 or W < 1:
        raise InvalidArgumentError(f"target size must be positive, got {target}")
    h, w = fm.shape[-2:]
    if H < h or W < w:
        raise InvalidArgumentError(f"cannot upsample {h}x{w} to smaller {H}x{W}")
    return bilinear_resize(fm, (H, W))


# ----------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------
@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(_arr(p)) for p in params], [np.zeros_like(_arr(p)) for p in params])


def _arr(p):
    return p.data if isinstance(p, Tensor) else np.asarray(p)


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update.

    ``params``/``grads`` are sequences of arrays (or Tensors, whose ``.data`` is
    read).  Returns ``(new_params, new_state)`` as fresh arrays; inputs are not
    modified.
    """
    params = [_arr(p) for p in params]
    grads = [_arr(g) for g in grads]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InvalidShapeError("params, grads and state must have equal length")
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape or p.shape != v.shape:
            raise InvalidShapeError(f"adam shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_p.append((p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype))
        new_m.append(m.astype(p.dtype))
        new_v.append(v.astype(p.dtype))
    return new_p, AdamState(new_m, new_v, t)


class Adam:
    """Stateful wrapper over :func:`adam_step` for a fixed list of parameters."""

    def __init__(self, params: Iterable[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.zeros_like(self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
        for p, d in zip(self.params, new):
            p.data = d


# ----------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------
MAGIC = b"TNSR"


def tensor_to_bytes(t) -> bytes:
    arr = np.asarray(_arr(t), dtype="<f4")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset=0):
    """Decode one tensor starting at ``offset``; returns ``(tensor, next_offset)``."""
    try:
        if buf[offset : offset + 4] != MAGIC:
            raise CorruptFileError("bad tensor magic")
        (rank,) = struct.unpack_from("<I", buf, offset + 4)
        if rank > 16:
            raise CorruptFileError(f"implausible tensor rank {rank}")
        dims = struct.unpack_from(f"<{rank}I", buf, offset + 8)
        start = offset + 8 + 4 * rank
        count = int(np.prod(dims, dtype=np.int64))
        end = start + 4 * count
        if end > len(buf):
            raise CorruptFileError("truncated tensor payload")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(dims)
    except struct.error as e:
        raise CorruptFileError(f"truncated tensor header: {e}") from None
    return Tensor(arr.astype(np.float32), dtype=np.float32), end


def save_tensor(t, path):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise CorruptFileError("trailing bytes after tensor")
    return t
