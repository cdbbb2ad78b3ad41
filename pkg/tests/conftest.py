import numpy as np
import pytest

from ticl.autodiff import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def finite_difference(fn, tensors, h=1e-3):
    """Central finite-difference gradients of scalar fn w.r.t. each tensor.

    Tensors must be float64 for the h=1e-3 step to beat rounding noise.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn()
            flat[i] = orig - h
            down = fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def check_gradients(build_loss, tensors, h=1e-3, rtol=1e-3, atol=1e-6):
    """Compare autodiff gradients of build_loss() against finite differences."""
    for t in tensors:
        t.zero_grad()
    loss = build_loss()
    loss.backward()
    auto = [None if t.grad is None else t.grad.copy() for t in tensors]
    fd = finite_difference(lambda: build_loss().item(), tensors, h)
    for a, f in zip(auto, fd):
        assert a is not None
        denom = np.maximum(np.abs(f), atol / rtol)
        assert (np.abs(a - f) / denom).max() < rtol, \
            f"max rel err {(np.abs(a - f) / denom).max():.2e}"


def random_tensor(rng, shape, requires_grad=True, scale=1.0):
    return Tensor(rng.normal(size=shape, scale=scale).astype(np.float64),
                  requires_grad=requires_grad, dtype=np.float64)
