import numpy as np
import pytest


def central_difference(f, arr, h=1e-6):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arr`` (in place).

    Complex arrays are perturbed along the real and the imaginary axis; the
    result follows the dL/dRe + i dL/dIm convention.
    """
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = out.reshape(-1)
    steps = (1.0, 1j) if np.iscomplexobj(arr) else (1.0,)
    for i in range(flat.size):
        orig = flat[i]
        for step in steps:
            flat[i] = orig + h * step
            fp = f()
            flat[i] = orig - h * step
            fm = f()
            flat[i] = orig
            gflat[i] += step * (fp - fm) / (2 * h)
    return out


def assert_grad_close(analytic, numeric, rtol=1e-5, atol=1e-9):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    for part in (np.real, np.imag):
        a, n = part(analytic), part(numeric)
        err = np.abs(a - n)
        bound = rtol * np.maximum(np.abs(a), np.abs(n)) + atol
        worst = np.max(err - bound) if err.size else -1
        assert worst <= 0, f"max abs err {err.max():.3e}, worst excess {worst:.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# filled by the acceptance tests, one PASS/FAIL line per criterion
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
