import numpy as np
import pytest

from advkit import tensor as T
from advkit.data import desk_digits
from advkit.model import build_model, train


def numeric_grad(f, x, h=1e-3):
    """Central differences of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    """Norm-wise relative error, guarded for near-zero gradients."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture(scope="session")
def digits():
    return desk_digits()


@pytest.fixture(scope="session")
def trained(digits):
    """small-a trained on the desk digits (about 15 s, shared by the session)."""
    tr, _ = digits
    model = build_model("small-a", tr.input_shape, 10, seed=0)
    model, hist = train(model, tr, epochs=12, lr=1e-3, batch_size=32, seed=0)
    return model, hist


@pytest.fixture
def tiny_model():
    return build_model("small-a", (1, 12, 12), 3, seed=1)


# ---------------------------------------------------------------- acceptance log
ACCEPTANCE = {}


@pytest.fixture
def acceptance(request):
    """``acceptance(n, ok, detail)`` records one line for the end-of-run summary."""

    def record(n, ok, detail=""):
        ACCEPTANCE[n] = (ok, detail)
        print(f"criterion {n}: {ok} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{ok}] criterion {n:2d}: {detail}")
