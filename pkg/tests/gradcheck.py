"""Central finite-difference helpers shared by the gradient tests."""
import numpy as np

EPS = 1e-6
TOL = 1e-4


def numeric_grad(f, x, eps=EPS):
    """d f / d x for scalar f, perturbing x in place one entry at a time."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def assert_close_grad(analytic, f, x, tol=TOL, name=""):
    err = rel_error(analytic, numeric_grad(f, x))
    assert err < tol, f"{name}: relative error {err:.2e}"
