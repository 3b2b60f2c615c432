import numpy as np
import pytest

from qgwnet.autodiff import Tensor, backward


def numeric_grad(fn, arr, h=1e-6):
    """Central differences of scalar ``fn(ndarray)``; independent of the tape."""
    arr = np.array(arr, dtype=np.float64)
    out = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = fn(arr.copy())
        arr[i] = old - h
        fm = fn(arr.copy())
        arr[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def tape_grad(fn, arr):
    x = Tensor(np.array(arr, dtype=np.float64), requires_grad=True)
    backward(fn(x))
    return x.grad


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float((np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))).max())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_digraph(rng, n, p=0.3, self_loops=False):
    """Dense weight matrix of a random directed graph."""
    w = np.where(rng.random((n, n)) < p, rng.uniform(0.1, 2.0, (n, n)), 0.0)
    if not self_loops:
        np.fill_diagonal(w, 0.0)
    return w


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[str, str] = {}


def record(cid: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[cid] = f"{cid} {'PASS' if ok else 'FAIL'}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE_LINES, key=lambda c: int(c[1:])):
        terminalreporter.write_line(ACCEPTANCE_LINES[cid])
