"""Experiment protocols: white-box table, substitute transfer, defenses, figures."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, run_attack
from .attention import compute_attention, map_to_pgm
from .data import Dataset
from .defenses import defended_predict
from .errors import InvalidArgumentError
from .metrics import (
    SCALE_NOTE,
    ExperimentReport,
    PerturbationMetrics,
    atomic_write,
    compute_metrics,
    emit_logits_curve,
    emit_perturbation_image,
    emit_table,
    image_grid,
    perturbation_image,
    pnm_bytes,
    to_csv,
    to_markdown,
)
from .model import Model, forward
from . import tensor as T

log = logging.getLogger(__name__)

DEFAULT_ATTACKS = ("fgsm", "pgd", "cw", "mi-fgsm", "deepfool", "finefool")

# DeepFool and C&W are minimal-perturbation attacks: unbounded unless asked.
ATTACK_DEFAULTS = {
    "deepfool": {"epsilon": 1.0, "iters": 50},
    "cw": {"epsilon": 1.0},
}


def attack_configs(names, base=None, per_attack=None, forced=None):
    """Resolve one :class:`AttackConfig` per attack.

    ``base``, ``per_attack[name]`` and ``forced`` are dicts of explicitly set
    fields.  Precedence, lowest first: field defaults, built-in per-attack
    defaults, ``base`` (config ``[attack]``), ``per_attack[name]``, ``forced``
    (command-line flags).
    """
    out = {}
    for name in names:
        fields = dict(ATTACK_DEFAULTS.get(name, {}))
        fields.update(base or {})
        if per_attack and name in per_attack:
            fields.update(per_attack[name])
        if forced:
            fields.update(forced)
        out[name] = AttackConfig(**fields)
    return out


def select_correct(model: Model, ds: Dataset, samples: int):
    """First ``samples`` images (dataset order) the model classifies correctly."""
    if samples < 1:
        raise InvalidArgumentError("samples must be >= 1")
    pred = model.predict(ds.images)
    idx = np.flatnonzero(pred == ds.labels)[:samples]
    return ds.images[idx], ds.labels[idx], idx


# ---------------------------------------------------------------------------
# white box
# ---------------------------------------------------------------------------
def white_box(model: Model, ds: Dataset, configs: dict, samples=100):
    """Attack the first correctly classified images with every configured attack."""
    X, Y, _ = select_correct(model, ds, samples)
    reports, results = [], {}
    for name, cfg in configs.items():
        rs = run_attack(name, model, X, Y, cfg)
        results[name] = rs
        reports.append(ExperimentReport.from_results(model.name, name, rs))
        log.info("%s: ASR %.2f%%", name, reports[-1].asr)
    return reports, results


def write_white_box(out, reports, results, header="", images=5):
    out = Path(out)
    emit_table(reports, out / "table.csv", out / "table.md")
    if header:
        atomic_write(out / "config.ini", header)
    for name, rs in results.items():
        for i, r in enumerate(rs[:images]):
            emit_logits_curve(r, out / "curves" / f"{name}_{i:03d}.csv")
            emit_perturbation_image(r.perturbation, out / "images" / f"{name}_{i:03d}_rho.pgm")


# ---------------------------------------------------------------------------
# transfer
# ---------------------------------------------------------------------------
@dataclass
class TransferRow:
    substitute: str
    attack: str
    metrics: PerturbationMetrics
    asr: dict  # target name -> percent


def transfer(substitutes: dict, targets: dict, ds: Dataset, configs: dict, samples=100):
    """Craft on each substitute, evaluate on each target.

    The attacked set is the substitute's own white-box set; a target's ASR
    counts only images that target classifies correctly when clean.
    """
    rows = []
    for sname, sub in substitutes.items():
        X, Y, _ = select_correct(sub, ds, samples)
        for aname, cfg in configs.items():
            rs = run_attack(aname, sub, X, Y, cfg)
            xs = np.stack([r.x_star for r in rs])
            m = PerturbationMetrics.mean_of(compute_metrics(r.x, r.x_star) for r in rs if r.success)
            rates = {}
            for tname, tgt in targets.items():
                if tgt is sub:
                    rates[tname] = 100.0 * np.mean([r.success for r in rs])
                    continue
                clean_ok = tgt.predict(X) == Y
                fooled = tgt.predict(xs) != Y
                rates[tname] = 100.0 * float(np.mean(fooled[clean_ok])) if clean_ok.any() else 0.0
            rows.append(TransferRow(sname, aname, m, rates))
    return rows


def write_transfer(out, rows, targets, header=""):
    out = Path(out)
    names = list(targets)
    head = ("substitute", "attack", "mean_rho", "L0") + tuple(f"ASR[{t}]" for t in names)
    data = [(r.substitute, r.attack, r.metrics.mean_rho, r.metrics.l0) + tuple(r.asr[t] for t in names) for r in rows]
    atomic_write(out / "transfer.csv", to_csv(head, data))
    md = []
    for r in rows:
        cells = [f"{r.asr[t]:.2f}%" + ("*" if t == r.substitute else "") for t in names]
        md.append((r.substitute, r.attack, r.metrics.mean_rho, r.metrics.l0, *cells))
    text = f"<!-- {SCALE_NOTE}; * = white-box -->\n" + to_markdown(head, md)
    atomic_write(out / "transfer.md", text)
    if header:
        atomic_write(out / "config.ini", header)


# ---------------------------------------------------------------------------
# defenses
# ---------------------------------------------------------------------------
@dataclass
class DefenseRow:
    attack: str
    defense: str
    asr: float
    accuracy: float


def defend(model: Model, ds: Dataset, configs: dict, defenses, samples=100):
    """Adversarials crafted on the bare model, classified through each filter.

    ``defenses`` is a list of :class:`DefenseConfig` (``kind="none"`` gives
    the undefended column).  The first rows (attack ``"clean"``) hold the
    filtered model's accuracy on the unperturbed images.
    """
    X, Y, _ = select_correct(model, ds, samples)
    rows = []
    for d in defenses:
        acc = 100.0 * float(np.mean(defended_predict(model, d, X) == Y))
        rows.append(DefenseRow("clean", d.name, 100.0 - acc, acc))
    results = {}
    for aname, cfg in configs.items():
        rs = run_attack(aname, model, X, Y, cfg)
        results[aname] = rs
        xs = np.stack([r.x_star for r in rs])
        for d in defenses:
            if d.kind == "none":
                a = 100.0 * float(np.mean([r.success for r in rs]))
                rows.append(DefenseRow(aname, d.name, a, 100.0 - a))
                continue
            pred = defended_predict(model, d, xs)
            acc = 100.0 * float(np.mean(pred == Y))
            rows.append(DefenseRow(aname, d.name, 100.0 - acc, acc))
    return rows, results


def write_defense(out, rows, header=""):
    out = Path(out)
    head = ("attack", "defense", "ASR", "accuracy")
    data = [(r.attack, r.defense, r.asr, r.accuracy) for r in rows]
    atomic_write(out / "defense.csv", to_csv(head, data))
    atomic_write(out / "defense.md", f"<!-- {SCALE_NOTE} -->\n" + to_markdown(head, data))
    if header:
        atomic_write(out / "config.ini", header)


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------
def _u8(img):
    return np.clip(np.round(np.asarray(img) * 255), 0, 255).astype(np.uint8)


def visualize(model: Model, ds: Dataset, configs: dict, out, samples=1, attention=False):
    """One grid per image: top row original + ``|rho| x 255`` per attack,
    bottom row original + adversarial per attack."""
    out = Path(out)
    X, Y, idx = select_correct(model, ds, samples)
    results = {name: run_attack(name, model, X, Y, cfg) for name, cfg in configs.items()}
    paths = []
    for i in range(len(X)):
        orig = _u8(X[i])
        top = [orig] + [perturbation_image(results[n][i].perturbation) for n in configs]
        bottom = [orig] + [_u8(results[n][i].x_star) for n in configs]
        p = out / f"grid_{int(idx[i]):05d}.pgm"
        atomic_write(p, pnm_bytes(image_grid([top, bottom])))
        paths.append(p)
        if attention and model.feature_tap_index is not None:
            with T.no_grad():
                _, fm = forward(model, X[i : i + 1])
            att = compute_attention(X[i], fm.data[0])
            map_to_pgm(att.map.data, out / f"attention_{int(idx[i]):05d}.pgm")
    return paths, results
