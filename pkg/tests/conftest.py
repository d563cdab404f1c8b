import numpy as np
import pytest

from condlab import Tensor, backward
from condlab.autograd import sum_all


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f at x, elementwise."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def check_grads(build_loss, leaves: dict[str, np.ndarray], rtol=1e-5, atol=1e-8, h=1e-5):
    """Compare analytic grads of build_loss() against finite differences.

    ``leaves`` maps names to float64 arrays that build_loss reads in place.
    """
    tensors = {name: Tensor(arr, requires_grad=True, dtype=np.float64) for name, arr in leaves.items()}
    loss = build_loss(tensors)
    backward(loss)
    for name, arr in leaves.items():
        def f(name=name):
            fresh = {n: Tensor(a, requires_grad=False, dtype=np.float64) for n, a in leaves.items()}
            return float(build_loss(fresh).data)

        num = fd_grad(f, arr, h=h)
        ana = tensors[name].grad
        err = np.abs(ana - num)
        tol = atol + rtol * np.maximum(np.abs(ana), np.abs(num))
        assert np.all(err <= tol), f"gradient mismatch for {name}: max err {err.max():.3e}"


def scalarize(t):
    """Reduce any tensor to a scalar for backward()."""
    return sum_all(t)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
