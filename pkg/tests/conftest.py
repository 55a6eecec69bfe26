import numpy as np
import pytest

from assetgen import tensor as T


@pytest.fixture(autouse=True)
def _finite_checks_on():
    prev = T.set_finite_checks(True)
    yield
    T.set_finite_checks(prev)


def numeric_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. x, mutated in place."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def assert_grads_close(g_ad: np.ndarray, g_fd: np.ndarray, rtol: float, atol: float = 1e-7):
    np.testing.assert_allclose(g_ad, g_fd, rtol=rtol, atol=atol)
