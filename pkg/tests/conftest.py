import numpy as np
import pytest

from saconvnet.tensor import GradTape, Tensor


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x.copy())
        flat[i] = orig - eps
        down = f(x.copy())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4, floor=1e-6):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = np.max(np.abs(analytic - numeric) / scale)
    assert err < rtol, f"max relative error {err:.3e}"


def check_op_gradients(build, *arrays, rtol=1e-4):
    """``build(*tensors) -> scalar Tensor``; compares tape vs finite differences per input."""
    tape = GradTape()
    leaves = [tape.watch(a, name=f"x{i}") for i, a in enumerate(arrays)]
    grads = tape.backward(build(*leaves))
    for i, a in enumerate(arrays):
        def f(v, i=i):
            args = [Tensor(arr) for arr in arrays]
            args[i] = Tensor(v)
            return build(*args).item()

        assert_grad_close(grads[f"x{i}"], numeric_grad(f, a), rtol=rtol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
