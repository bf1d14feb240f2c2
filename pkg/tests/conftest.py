import numpy as np
import pytest

from autoquant import tensor as T


def finite_difference(fn, arrays, h=1e-2):
    """Central differences of ``fn(*tensors).item()`` w.r.t. every array entry.

    The engine evaluates in float32, so rounding noise in the difference
    scales like eps32 / h; h = 1e-2 keeps it near 1e-5 while the O(h^2)
    truncation term stays smaller still for the smooth ops tested.
    """
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            fp = fn(*[T.Tensor(x) for x in plus]).item()
            fm = fn(*[T.Tensor(x) for x in minus]).item()
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def autodiff(fn, arrays):
    params = [T.Parameter(a) for a in arrays]
    out = fn(*params)
    out.backward()
    return [np.asarray(p.grad, dtype=np.float64) for p in params]


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance verdicts ---------------------------------------------------------------------

VERDICTS = {}


def record_verdict(criterion, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    VERDICTS[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[key])
