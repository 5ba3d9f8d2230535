import dara  # noqa: F401  (pins BLAS threads before numpy spins up)
import numpy as np
import pytest


def finite_difference(f, params: dict[str, np.ndarray], step: float = 1e-5):
    """Central finite differences of the scalar f() w.r.t. each param entry.

    f reads the arrays in `params` by reference, so in-place perturbation
    is visible to it.
    """
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat, gf = arr.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * step)
        grads[name] = g
    return grads


def rel_err(got: np.ndarray, want: np.ndarray) -> float:
    got = np.asarray(got, dtype=float)
    want = np.asarray(want, dtype=float)
    scale = max(float(np.abs(want).max(initial=0.0)), 1e-10)
    return float(np.abs(got - want).max(initial=0.0)) / scale


def ridge_gd_oracle(pool, query, lam, grad_tol=1e-10, max_iters=400_000):
    """Plain gradient descent on ||W P - Q||^2 + lam ||W||^2, step 1/L.

    Independent of the closed form: touches only the objective's own
    gradient 2((W P - Q) P^T + lam W).
    """
    lip = 2.0 * (float(np.linalg.eigvalsh(pool @ pool.T).max()) + lam)
    w = np.zeros((query.shape[0], pool.shape[0]))
    for _ in range(max_iters):
        grad = 2.0 * ((w @ pool - query) @ pool.T + lam * w)
        if np.abs(grad).max() < grad_tol:
            break
        w -= grad / lip
    return w


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)
