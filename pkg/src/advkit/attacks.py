"""Attention-guided momentum attack and five baselines behind one interface.

Every attack takes ``(model, x, y, cfg)`` with ``x`` either one image
``[C,H,W]`` (returns an :class:`AttackResult`) or a batch ``[N,C,H,W]``
(returns a list).  Internally all attacks *minimise* a loss:

* FGSM, BIM, PGD, MI-FGSM: negative cross-entropy of the true label
  (untargeted) or cross-entropy of the target label (targeted);
* FineFool and C&W: the clamped logit margin plus ``c2 * ||x - x0||_2^2``.

Examples are processed as an active set: once an example succeeds (with
``early_stop``) or exhausts its budget it is dropped from the batch and the
model is never queried on it again.
"""
from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .attention import compute_attention, shape_perturbation
from .errors import InvalidArgumentError, InvalidShapeError, NumericError, ZeroGradientError
from .model import forward
from .tensor import Tensor

log = logging.getLogger(__name__)

STEP_NORMS = ("l2", "linf", "none", "sign")


@dataclass
class AttackConfig:
    epsilon: float = 0.1
    alpha: float | None = None  # None -> epsilon / iters
    iters: int = 10
    mu: float = 1.0
    kappa: float = 0.0
    c2: float = 0.01
    target: int | None = None
    seed: int = 0
    early_stop: bool = True
    # FineFool step scaling, see finefool()
    step_norm: str = "l2"
    overshoot: float = 0.02
    deepfool_classes: int = 10
    cw_steps: int = 100
    cw_lr: float = 0.01
    record: bool = False

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise InvalidArgumentError(f"epsilon must lie in [0,1], got {self.epsilon}")
        if self.iters < 1:
            raise InvalidArgumentError(f"iters must be >= 1, got {self.iters}")
        if self.alpha is not None and not self.alpha > 0:
            raise InvalidArgumentError(f"alpha must be > 0, got {self.alpha}")
        if self.mu < 0 or self.kappa < 0 or self.c2 < 0:
            raise InvalidArgumentError("mu, kappa and c2 must be non-negative")
        if self.step_norm not in STEP_NORMS:
            raise InvalidArgumentError(f"step_norm must be one of {STEP_NORMS}")

    @property
    def step(self):
        return self.alpha if self.alpha is not None else self.epsilon / self.iters


@dataclass
class AttackResult:
    attack: str
    x: np.ndarray
    x_star: np.ndarray
    label: int
    target: int | None
    success: bool
    clean_correct: bool
    iterations: int
    queries: int
    logits_trace: np.ndarray  # [passes, K]; row 0 is the clean input
    diagnostic: str = ""
    history: dict | None = None

    @property
    def perturbation(self):
        return self.x_star - self.x

    @property
    def adversarial_label(self):
        return int(np.argmax(self.logits_trace[-1]))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------
def _margin(logits: Tensor, y, targeted: bool):
    k = logits.shape[1]
    if k < 2:
        raise InvalidArgumentError("margin loss needs at least two classes")
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(y)), y] = 1
    own = T.pick(logits, y)
    others = T.tmax(logits + Tensor(onehot * -1e9, dtype=logits.dtype), axis=1)
    return others - own if targeted else own - others


def loss_j(logits, y, x, x0, kappa=0.0, c2=0.01, target=None):
    """Clamped margin plus squared-L2 regulariser, summed over the batch.

    Untargeted: ``max(-kappa, Z_y - max_{j != y} Z_j)``; targeted with label
    ``t``: ``max(-kappa, max_{j != t} Z_j - Z_t)``.  Accepts a single logit
    vector ``[K]`` with a single image as well.
    """
    logits = T.as_tensor(logits)
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, -1))
    if logits.shape[1] < 2:
        raise InvalidArgumentError("loss needs K >= 2 classes")
    labels = np.full(logits.shape[0], target) if target is not None else y
    margin = T.clamp(_margin(logits, labels, target is not None), lo=-kappa)
    x, x0 = T.as_tensor(x), T.as_tensor(x0, T.as_tensor(x).dtype)
    d = x - x0
    return T.tsum(margin) + c2 * T.tsum(d * d)


def _ce_loss(logits, y, x, x0, cfg):
    if cfg.target is not None:
        return T.cross_entropy(logits, np.full(logits.shape[0], cfg.target), reduction="sum")
    return -T.cross_entropy(logits, y, reduction="sum")


def _j_loss(logits, y, x, x0, cfg):
    return loss_j(logits, y, x, x0, cfg.kappa, cfg.c2, cfg.target)


# ---------------------------------------------------------------------------
# shared machinery
# ---------------------------------------------------------------------------
def _verdict(logits, y, target):
    pred = np.argmax(logits, axis=1)
    return pred == target if target is not None else pred != y


def project(x_new, x0, eps):
    """Clip into the L-inf ball of radius ``eps`` around ``x0`` and into [0,1]."""
    return np.clip(np.clip(x_new, x0 - eps, x0 + eps), 0.0, 1.0).astype(x0.dtype)


class _Run:
    """Mutable per-batch attack state."""

    def __init__(self, name, model, x, y, cfg, clean_pass=True):
        self.name, self.model, self.cfg = name, model, cfg
        self.x0 = np.asarray(x, dtype=model.parameters()[0].dtype)
        self.y = np.asarray(y, dtype=np.int64).reshape(-1)
        n = len(self.x0)
        if len(self.y) != n:
            raise InvalidShapeError(f"{n} images but {len(self.y)} labels")
        self.x_star = self.x0.copy()
        self.iters = np.zeros(n, dtype=int)
        self.queries = np.zeros(n, dtype=int)
        self.traces = [[] for _ in range(n)]
        self.diag = [""] * n
        self.history = [dict() for _ in range(n)] if cfg.record else None
        self.started = False
        if clean_pass:
            self.start(model.logits(self.x0))

    def start(self, clean):
        """Record the clean pass (one query per example)."""
        n = len(self.x0)
        self.queries += 1
        self.clean_correct = np.argmax(clean, axis=1) == self.y
        self.success = _verdict(clean, self.y, self.cfg.target)
        self.done = self.success.copy()
        for i in range(n):
            self.traces[i].append(clean[i].copy())
        self.started = True

    def active(self):
        return np.flatnonzero(~self.done)

    def observe(self, idx, logits):
        """Record a forward pass over ``idx``; returns the success mask."""
        self.queries[idx] += 1
        for j, i in enumerate(idx):
            self.traces[i].append(logits[j].copy())
        ok = _verdict(logits, self.y[idx], self.cfg.target)
        self.success[idx] = ok
        return ok

    def results(self):
        out = []
        for i in range(len(self.x0)):
            out.append(
                AttackResult(
                    attack=self.name,
                    x=self.x0[i],
                    x_star=self.x_star[i],
                    label=int(self.y[i]),
                    target=self.cfg.target,
                    success=bool(self.success[i]),
                    clean_correct=bool(self.clean_correct[i]),
                    iterations=int(self.iters[i]),
                    queries=int(self.queries[i]),
                    logits_trace=np.stack(self.traces[i]),
                    diagnostic=self.diag[i],
                    history=None if self.history is None else self.history[i],
                )
            )
        return out


def _gradient(model, x, y, x0, cfg, loss_fn, need_fm=False):
    xt = Tensor(x, requires_grad=True, dtype=x.dtype)
    logits, fm = forward(model, xt)
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("non-finite logits in forward pass")
    loss = loss_fn(logits, y, xt, x0, cfg)
    loss.backward()
    return logits.data, xt.grad, (fm.data if need_fm and fm is not None else None)


def _iterate(run: _Run, loss_fn, update, need_fm=False):
    """Gradient loop shared by the iterative attacks.

    ``update(idx, x, grad, fm)`` returns the unprojected next iterate for the
    examples ``idx`` that are still running; it may mark examples done itself.
    """
    cfg = run.cfg
    for it in range(cfg.iters + 1):
        if not run.started:
            # the first gradient pass doubles as the clean evaluation
            idx, x = np.arange(len(run.x0)), run.x_star
            logits, grad, fm = _gradient(run.model, x, run.y, run.x0, cfg, loss_fn, need_fm)
            run.start(logits)
            if cfg.iters == 0:
                break
        else:
            idx = run.active()
            if len(idx) == 0:
                break
            x = run.x_star[idx]
            if it == cfg.iters:
                run.observe(idx, run.model.logits(x))
                run.done[idx] = True
                break
            logits, grad, fm = _gradient(run.model, x, run.y[idx], run.x0[idx], cfg, loss_fn, need_fm)
            ok = run.observe(idx, logits)
            if cfg.early_stop:
                run.done[idx[ok]] = True
        keep = ~run.done[idx]
        if not keep.any():
            continue
        idx, x, grad = idx[keep], x[keep], grad[keep]
        fm = fm[keep] if fm is not None else None
        new = update(idx, x, grad, fm)
        moving = ~run.done[idx]  # update() may retire examples (zero gradient)
        idx, new = idx[moving], new[moving]
        run.x_star[idx] = project(new, run.x0[idx], cfg.epsilon)
        run.iters[idx] += 1


def _batched(fn):
    @functools.wraps(fn)
    def wrapper(model, x, y, cfg=None, **kwargs):
        cfg = cfg or AttackConfig()
        x = np.asarray(x)
        if x.ndim == 3:
            return fn(model, x[None], np.asarray([y]), cfg, **kwargs)[0]
        if x.ndim != 4:
            raise InvalidShapeError(f"expected [C,H,W] or [N,C,H,W], got {x.shape}")
        return fn(model, x, np.asarray(y).reshape(-1), cfg, **kwargs)

    return wrapper


# ---------------------------------------------------------------------------
# sign-gradient family
# ---------------------------------------------------------------------------
@_batched
def fgsm(model, x, y, cfg):
    """One step of size ``epsilon`` along the sign of the loss gradient."""
    return bim.__wrapped__(model, x, y, replace(cfg, iters=1, alpha=cfg.epsilon or None), name="fgsm")


@_batched
def bim(model, x, y, cfg, name="bim", x_init=None):
    # a random start is evaluated on its own, after a separate clean pass
    run = _Run(name, model, x, y, cfg, clean_pass=x_init is not None)
    if x_init is not None:
        run.x_star[~run.done] = x_init[~run.done]
    step = cfg.step

    def update(idx, xs, grad, fm):
        return xs - step * np.sign(grad)

    _iterate(run, _ce_loss, update)
    return run.results()


@_batched
def pgd(model, x, y, cfg):
    """BIM from a uniform random start inside the epsilon ball."""
    rng = np.random.default_rng(cfg.seed)
    x = np.asarray(x, dtype=model.parameters()[0].dtype)
    start = project(x + rng.uniform(-cfg.epsilon, cfg.epsilon, x.shape).astype(x.dtype), x, cfg.epsilon)
    return bim.__wrapped__(model, x, y, cfg, name="pgd", x_init=start)


def _l1_normalize(grad):
    flat = np.abs(grad).reshape(len(grad), -1).sum(axis=1)
    return grad / np.where(flat > 0, flat, 1).reshape(-1, *([1] * (grad.ndim - 1)))


@_batched
def mi_fgsm(model, x, y, cfg):
    """Momentum iterative FGSM: ``g <- mu g + grad/||grad||_1``, step ``alpha sign(g)``."""
    run = _Run("mi-fgsm", model, x, y, cfg, clean_pass=False)
    g = np.zeros_like(run.x0)
    step = cfg.step

    def update(idx, xs, grad, fm):
        g[idx] = cfg.mu * g[idx] + _l1_normalize(grad)
        if run.history is not None:
            for j, i in enumerate(idx):
                h = run.history[i]
                h.setdefault("grads", []).append(grad[j].copy())
                h["g"] = g[i].copy()
        return xs - step * np.sign(g[idx])

    _iterate(run, _ce_loss, update)
    return run.results()


# ---------------------------------------------------------------------------
# FineFool
# ---------------------------------------------------------------------------
def _scale_step(g, mode, step):
    if mode == "sign":
        return step * np.sign(g)
    if mode == "none":
        return step * g
    if mode == "linf":
        m = np.max(np.abs(g))
        return step * g / m if m > 0 else g
    n = np.sqrt(np.sum(g.astype(np.float64) ** 2))
    return (step * math.sqrt(g.size) * g / n).astype(g.dtype) if n > 0 else g


@_batched
def finefool(model, x, y, cfg, attention=None):
    """Momentum attack whose direction is shaped by a feature-map attention map.

    Per iteration: the gradient of the margin loss and the tap activation come
    from one forward/backward pass at the current iterate; the activation is
    upsampled and turned into an attention map against the *clean* image; the
    momentum buffer accumulates ``map * grad / ||grad||_1``; the iterate moves
    against the buffer and is projected onto the epsilon ball and [0,1].

    ``cfg.step_norm`` sets how the buffer becomes a step of size ``alpha``:
    ``"none"`` uses ``alpha * g`` as is, ``"linf"`` rescales ``g`` to L-inf
    norm ``alpha``, ``"l2"`` to the L2 norm of an ``alpha``-sized sign step
    (``alpha * sqrt(n)``), ``"sign"`` takes ``alpha * sign(g)``.  With
    ``alpha`` unset the step defaults to ``epsilon`` rather than
    ``epsilon / iters``: the map concentrates each L2 step on few pixels,
    which saturate at the ball's edge long before the rest move.

    ``attention(image, feature_map) -> [1,H,W]`` overrides the map (tests).
    """
    if model.feature_tap_index is None:
        raise InvalidArgumentError("finefool needs a model with a feature tap")
    run = _Run("finefool", model, x, y, cfg, clean_pass=False)
    g = np.zeros_like(run.x0)
    step = cfg.alpha if cfg.alpha is not None else cfg.epsilon

    def update(idx, xs, grad, fm):
        new = xs.copy()
        with T.no_grad():
            for j, i in enumerate(idx):
                if attention is None:
                    w_map = compute_attention(run.x0[i], fm[j]).map
                else:
                    w_map = T.as_tensor(attention(run.x0[i], fm[j]), xs.dtype)
                try:
                    direction = shape_perturbation(grad[j], w_map).data
                except ZeroGradientError:
                    run.done[i] = True
                    run.diag[i] = f"zero gradient at iteration {run.iters[i]}"
                    continue
                g[i] = cfg.mu * g[i] + direction
                new[j] = xs[j] - _scale_step(g[i], cfg.step_norm, step)
                if run.history is not None:
                    h = run.history[i]
                    h.setdefault("grads", []).append(grad[j].copy())
                    h.setdefault("maps", []).append(np.asarray(w_map.data).copy())
                    h["g"] = g[i].copy()
        return new

    _iterate(run, _j_loss, update, need_fm=True)
    return run.results()


# ---------------------------------------------------------------------------
# DeepFool
# ---------------------------------------------------------------------------
@_batched
def deepfool(model, x, y, cfg):
    """Iterated minimal L2 step to the nearest linearised class boundary.

    Candidate classes are the ``cfg.deepfool_classes`` highest-scoring ones on
    the clean input.  The accumulated step is applied with factor
    ``1 + overshoot`` and projected like every other attack.  Untargeted only.
    """
    run = _Run("deepfool", model, x, y, cfg, clean_pass=False)
    x0, y = run.x0, run.y
    k_total = model.num_classes
    nc = min(cfg.deepfool_classes, k_total)
    order = None
    r_tot = np.zeros_like(x0)
    for it in range(cfg.iters + 1):
        idx = run.active() if run.started else np.arange(len(x0))
        if len(idx) == 0:
            break
        xs = run.x_star[idx]
        if it == cfg.iters:
            run.observe(idx, model.logits(xs))
            run.done[idx] = True
            break
        grads = np.zeros((k_total,) + xs.shape, dtype=xs.dtype)
        # one forward/backward per candidate class; rank classes on the first
        needed = range(k_total) if order is None else np.unique(np.concatenate([order[idx].ravel(), y[idx]]))
        logits = None
        for k in needed:
            xt = Tensor(xs, requires_grad=True, dtype=xs.dtype)
            out, _ = forward(model, xt)
            T.tsum(T.pick(out, np.full(len(idx), k))).backward()
            grads[k] = xt.grad
            if logits is None:
                logits = out.data
            else:
                run.queries[idx] += 1
        if order is None:
            order = np.argsort(-logits, axis=1, kind="stable")[:, :nc]
            run.start(logits)
            keep = ~run.done
            idx, xs, grads, logits = idx[keep], xs[keep], grads[:, keep], logits[keep]
            ok = np.zeros(len(idx), dtype=bool)
        else:
            ok = run.observe(idx, logits)
            run.done[idx[ok]] = True
        for j, i in enumerate(idx):
            if ok[j]:
                continue
            yi = y[i]
            best, best_r = np.inf, None
            for k in order[i]:
                if k == yi:
                    continue
                w = grads[k, j] - grads[yi, j]
                f = logits[j, k] - logits[j, yi]
                wn = float(np.sqrt(np.sum(w.astype(np.float64) ** 2)))
                if wn == 0:
                    continue
                dist = abs(f) / wn
                if dist < best:
                    best, best_r = dist, (abs(f) / wn**2) * w
            if best_r is None:
                run.done[i] = True
                run.diag[i] = "zero boundary gradient"
                continue
            r_tot[i] += best_r
            if run.history is not None:
                run.history[i].setdefault("step_norms", []).append(best)
            run.x_star[i] = project(x0[i] + (1 + cfg.overshoot) * r_tot[i], x0[i], cfg.epsilon)
            run.iters[i] += 1
    return run.results()


# ---------------------------------------------------------------------------
# Carlini-Wagner L2
# ---------------------------------------------------------------------------
@_batched
def cw(model, x, y, cfg):
    """Adam on the margin objective in tanh space, fixed ``c2``.

    ``x = (tanh(w) + 1) / 2`` keeps pixels in [0,1]; the epsilon ball is
    enforced by clipping ``x - x0`` inside the objective.  Runs
    ``cfg.cw_steps`` Adam steps and returns the successful iterate with the
    smallest L2 distortion, else the last one.
    """
    run = _Run("cw", model, x, y, cfg)
    x0 = run.x0
    dt = x0.dtype
    w = np.arctanh(np.clip(2 * x0 - 1, -1 + 1e-6, 1 - 1e-6)).astype(dt)
    state = T.AdamState.zeros_like([w])
    best_l2 = np.full(len(x0), np.inf)
    best_x = x0.copy()
    for step in range(cfg.cw_steps + 1):
        idx = run.active()
        if len(idx) == 0:
            break
        wt = Tensor(w[idx], requires_grad=True, dtype=dt)
        xa = (T.tanh(wt) + 1.0) * 0.5
        x0t = Tensor(x0[idx], dtype=dt)
        xe = x0t + T.clamp(xa - x0t, -cfg.epsilon, cfg.epsilon)
        logits, _ = forward(model, xe)
        ok = run.observe(idx, logits.data)
        xe_np = np.clip(xe.data, 0, 1)
        l2 = np.sqrt(((xe_np - x0[idx]) ** 2).reshape(len(idx), -1).sum(axis=1))
        better = ok & (l2 < best_l2[idx])
        best_l2[idx[better]] = l2[better]
        best_x[idx[better]] = xe_np[better]
        run.x_star[idx] = xe_np
        if step == cfg.cw_steps:
            break
        loss = _j_loss(logits, run.y[idx], xe, x0t, cfg)
        loss.backward()
        full = np.zeros_like(w)
        full[idx] = wt.grad
        (w_new,), state = adam_masked(w, full, state, idx, cfg.cw_lr)
        w = w_new
        run.iters[idx] += 1
    found = np.isfinite(best_l2)
    run.x_star[found] = best_x[found]
    # the last trace entry must describe the returned iterate
    moved = np.flatnonzero(run.iters > 0)
    if len(moved):
        fin = model.logits(run.x_star[moved])
        run.queries[moved] += 1
        for j, i in enumerate(moved):
            run.traces[i].append(fin[j])
        run.success[moved] = _verdict(fin, run.y[moved], cfg.target)
    return run.results()


def adam_masked(w, grad, state, idx, lr):
    """Adam step restricted to rows ``idx`` (other rows keep params and moments)."""
    (new,), new_state = T.adam_step([w], [grad], state, lr=lr)
    keep = np.ones(len(w), dtype=bool)
    keep[idx] = False
    new[keep] = w[keep]
    new_state.m[0][keep] = state.m[0][keep]
    new_state.v[0][keep] = state.v[0][keep]
    return (new,), new_state


ATTACKS = {
    "fgsm": fgsm,
    "bim": bim,
    "pgd": pgd,
    "mi-fgsm": mi_fgsm,
    "deepfool": deepfool,
    "cw": cw,
    "finefool": finefool,
}


def run_attack(name, model, x, y, cfg=None):
    try:
        fn = ATTACKS[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown attack {name!r}; choose from {sorted(ATTACKS)}") from None
    return fn(model, x, y, cfg)
