import numpy as np
import pytest


def fd_gradient(f, x, h=1e-3):
    """Central-difference gradient of scalar ``f(x)`` at every coordinate.

    ``f`` must accept a float64 array and return a Python float. Kept
    independent of the autodiff engine so it can serve as its oracle.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        xp = x.copy()
        xp[idx] = orig + h
        xm = x.copy()
        xm[idx] = orig - h
        g[idx] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def rel_err(a, b, floor=1e-8):
    """Max elementwise relative error with an absolute floor on the denominator."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
