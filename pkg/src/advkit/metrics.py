"""Perturbation metrics, attack success rate, and report/image emitters.

Scale conventions (echoed in every report header):

* ``mean_rho`` is the mean absolute perturbation on the [0,1] pixel scale;
* ``l0`` is the percentage of pixel positions where any channel changed by
  more than 1/255;
* ``l2`` and ``linf`` are measured on the 0-255 scale.
"""
from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidShapeError

L0_THRESHOLD = 1.0 / 255.0
SCALE_NOTE = "mean_rho on [0,1]; L0 = % pixels with any channel |rho| > 1/255; L2, Linf on 0-255"


@dataclass(frozen=True)
class PerturbationMetrics:
    mean_rho: float
    l0: float  # percent
    l2: float
    linf: float

    @classmethod
    def mean_of(cls, items):
        items = list(items)
        if not items:
            return cls(0.0, 0.0, 0.0, 0.0)
        return cls(*(float(np.mean([getattr(m, f) for m in items])) for f in ("mean_rho", "l0", "l2", "linf")))


def compute_metrics(x, x_star) -> PerturbationMetrics:
    x = np.asarray(x, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    if x.shape != x_star.shape:
        raise InvalidShapeError(f"shape mismatch {x.shape} vs {x_star.shape}")
    if x.ndim != 3:
        raise InvalidShapeError(f"expected [C,H,W], got {x.shape}")
    rho = x_star - x
    a = np.abs(rho)
    changed = (a > L0_THRESHOLD).any(axis=0)
    return PerturbationMetrics(
        mean_rho=float(a.mean()),
        l0=100.0 * float(changed.sum()) / changed.size,
        l2=float(np.sqrt(np.sum((255.0 * rho) ** 2))),
        linf=float(255.0 * a.max()) if a.size else 0.0,
    )


def asr(results) -> float:
    """Success percentage over the examples the clean model got right."""
    eligible = [r for r in results if r.clean_correct]
    if not eligible:
        return 0.0
    return 100.0 * sum(r.success for r in eligible) / len(eligible)


def median_l2(results) -> float:
    vals = [compute_metrics(r.x, r.x_star).l2 for r in results if r.clean_correct and r.success]
    return float(np.median(vals)) if vals else float("nan")


@dataclass
class ExperimentReport:
    model: str
    attack: str
    metrics: PerturbationMetrics
    asr: float
    accuracy: float  # accuracy under attack, percent
    substitute: str | None = None
    defense: str | None = None
    n: int = 0
    traces: list = field(default_factory=list, repr=False)

    @classmethod
    def from_results(cls, model, attack, results, substitute=None):
        ok = [r for r in results if r.clean_correct]
        m = PerturbationMetrics.mean_of(compute_metrics(r.x, r.x_star) for r in ok if r.success)
        a = asr(results)
        return cls(model, attack, m, a, 100.0 - a if ok else 0.0, substitute, None, len(ok),
                   [curve_rows(r) for r in ok])


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------
def atomic_write(path, data, mode="w"):
    """Write via a temp file in the same directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode + ("b" if isinstance(data, bytes) else ""), **({} if isinstance(data, bytes) else {"newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


TABLE_COLUMNS = ("model", "attack", "mean_rho", "L0", "L2", "Linf", "ASR")


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def table_rows(reports):
    for r in reports:
        yield (r.model, r.attack, r.metrics.mean_rho, r.metrics.l0, r.metrics.l2, r.metrics.linf, r.asr)


def to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def to_markdown(header, rows, digits=4) -> str:
    def cell(v):
        return f"{v:.{digits}g}" if isinstance(v, (float, np.floating)) else str(v)

    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(cell(v) for v in row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def emit_table(reports, csv_path=None, md_path=None):
    """Render reports in a fixed column order.

    Returns ``(markdown_text, csv_text)``; each is also written atomically
    when a path is given.
    """
    rows = list(table_rows(reports))
    text_csv = to_csv(TABLE_COLUMNS, rows)
    text_md = to_markdown(TABLE_COLUMNS, rows)
    if csv_path:
        atomic_write(csv_path, text_csv)
    if md_path:
        atomic_write(md_path, f"<!-- {SCALE_NOTE} -->\n" + text_md)
    return text_md, text_csv


def read_csv(path_or_text):
    text = path_or_text
    if os.path.exists(str(path_or_text)):
        with open(path_or_text, newline="") as fh:
            text = fh.read()
    rows = list(csv.reader(io.StringIO(text)))
    return rows[0], rows[1:]


def curve_rows(result):
    """``(iteration, logit_true, logit_adv)`` for every recorded forward pass.

    The adversarial label is the final prediction when the attack succeeded,
    otherwise the strongest wrong class at the final iterate.
    """
    trace = np.asarray(result.logits_trace)
    final = trace[-1].copy()
    if result.success and result.target is None:
        adv = int(np.argmax(final))
    elif result.target is not None:
        adv = int(result.target)
    else:
        final[result.label] = -np.inf
        adv = int(np.argmax(final))
    return [(i, float(z[result.label]), float(z[adv])) for i, z in enumerate(trace)]


def emit_logits_curve(result, path=None) -> str:
    text = to_csv(("iteration", "logit_true", "logit_adv"), curve_rows(result))
    if path:
        atomic_write(path, text)
    return text


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------
def _to_u8(img):
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def pnm_bytes(img_u8) -> bytes:
    """P5 (``[H,W]`` or ``[1,H,W]``) or P6 (``[3,H,W]``) binary image."""
    img = np.asarray(img_u8, dtype=np.uint8)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim == 2:
        h, w = img.shape
        return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()
    if img.ndim == 3 and img.shape[0] == 3:
        _, h, w = img.shape
        return f"P6\n{w} {h}\n255\n".encode() + np.transpose(img, (1, 2, 0)).tobytes()
    raise InvalidShapeError(f"cannot encode image of shape {img.shape}")


def write_pgm(img_u8, path):
    atomic_write(path, pnm_bytes(img_u8))


def read_pnm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        w, h = map(int, fh.readline().split())
        fh.readline()
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    if magic == b"P5":
        return data.reshape(h, w)
    return data.reshape(h, w, 3).transpose(2, 0, 1)


def perturbation_image(rho):
    """Perturbation magnitude magnified 255 times, clamped to [0,255]."""
    return _to_u8(np.abs(np.asarray(rho, dtype=np.float64)) * 255.0)


def emit_perturbation_image(rho, path=None, fmt="pgm"):
    img = perturbation_image(rho)
    if path:
        if fmt == "png":
            from PIL import Image

            arr = img[0] if img.shape[0] == 1 else np.transpose(img, (1, 2, 0))
            buf = io.BytesIO()
            Image.fromarray(arr).save(buf, format="PNG")
            atomic_write(path, buf.getvalue())
        else:
            write_pgm(img, path)
    return img


def image_grid(rows, pad=2, fill=255):
    """Tile ``rows`` (lists of ``[C,H,W]`` uint8 images, equal sizes) into one image."""
    c, h, w = rows[0][0].shape
    n_cols = max(len(r) for r in rows)
    grid = np.full((c, len(rows) * (h + pad) + pad, n_cols * (w + pad) + pad), fill, dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y0, x0 = pad + i * (h + pad), pad + j * (w + pad)
            grid[:, y0 : y0 + h, x0 : x0 + w] = img
    return grid
