import numpy as np
import pytest
from scipy.optimize import linprog
import scipy.sparse as sp

from splitjko.measures import Domain, GridMeasure

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(number, title, passed, detail):
    ACCEPTANCE[number] = (title, bool(passed), detail)
    print(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")


def periodic_lp(dom, a, b):
    """Exact OT on a 1D periodic grid by the LP with the wrapped cost."""
    x = dom.axis_centers(0)
    L = dom.lengths[0]
    d = np.abs(x[:, None] - x[None, :])
    C = np.minimum(d, L - d) ** 2
    ia, ib = np.nonzero(a)[0], np.nonzero(b)[0]
    n, m = len(ia), len(ib)
    rows = sp.kron(sp.eye(n), np.ones((1, m)))
    cols = sp.kron(np.ones((1, n)), sp.eye(m))
    res = linprog(C[np.ix_(ia, ib)].ravel(), A_eq=sp.vstack([rows, cols]).tocsr(),
                  b_eq=np.concatenate([a[ia], b[ib]]), bounds=(0, None), method="highs")
    assert res.status == 0
    return res.fun


def sparse_measure(rng, dom, max_support=8):
    k = int(rng.integers(1, max_support + 1))
    n = int(np.prod(dom.cells))
    d = np.zeros(n)
    idx = rng.choice(n, k, replace=False)
    d[idx] = rng.random(k) + 0.1
    return GridMeasure.from_density(dom, d.reshape(dom.shape))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def line():
    return Domain.interval(-4.0, 4.0, 128)


@pytest.fixture
def ring():
    return Domain.interval(-4.0, 4.0, 128, boundary="periodic")
