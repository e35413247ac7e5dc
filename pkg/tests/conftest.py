import numpy as np
import pytest

from bcos.data import synth_split
from bcos.models import build_tiny
from bcos.tensor import Tensor


def numeric_grad(f, xs, h=1e-5):
    """Central differences of the scalar f(*xs) with respect to each array in xs."""
    grads = []
    for x in xs:
        g = np.zeros_like(x)
        it = np.nditer(x, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = x[i]
            x[i] = old + h
            fp = f(*xs)
            x[i] = old - h
            fm = f(*xs)
            x[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(build, xs, proj):
    """Gradient of sum(build(*tensors) * proj) via the tape."""
    ts = [Tensor(x.copy(), requires_grad=True) for x in xs]
    out = build(*ts)
    out.backward(proj)
    return [t.grad for t in ts]


def grad_error(analytic, numeric, small=1e-3):
    """Max relative error over entries with |g| >= small, max absolute error elsewhere."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    mag = np.maximum(np.abs(a), np.abs(n))
    big = mag >= small
    rel = float((np.abs(a - n)[big] / mag[big]).max()) if big.any() else 0.0
    absolute = float(np.abs(a - n)[~big].max()) if (~big).any() else 0.0
    return rel, absolute


def check_gradients(build, xs, rng, rel_tol=1e-5, abs_tol=1e-7):
    """Compare tape gradients of build(*xs) with central finite differences (float64)."""
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    with_tape = build(*[Tensor(x) for x in xs])
    proj = rng.normal(size=with_tape.shape)
    f = lambda *arrs: float(np.sum(build(*[Tensor(a) for a in arrs]).data * proj))
    num = numeric_grad(f, [x.copy() for x in xs])
    ana = analytic_grad(build, xs, proj)
    for a, n in zip(ana, num):
        rel, absolute = grad_error(a, n)
        assert rel <= rel_tol and absolute <= abs_tol, (rel, absolute)
    return ana


def random_encoded(rng, n, size, dtype=np.float64):
    rgb = rng.uniform(0, 1, size=(n, 3, size, size))
    return np.concatenate([rgb, 1 - rgb], axis=1).astype(dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_small():
    return synth_split(3, 256, 128, 4, 16)


@pytest.fixture(scope="session")
def tiny64():
    return build_tiny(B=2.0, maxout=2, channels=8, num_classes=4, seed=5, dtype=np.float64)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
