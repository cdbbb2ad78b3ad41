import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ticl.autodiff import (ContractError, ShapeError, Tensor, concat,
                           cross_entropy, gather_rows, layer_norm, log_softmax,
                           no_grad, one_hot, softmax)

from conftest import check_gradients, random_tensor


def test_square_gradient_analytic():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_backward_on_non_scalar_raises():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2).backward()


def test_matmul_shape_errors():
    a = Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        a @ Tensor(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        a @ Tensor(np.ones(3))


def test_unconnected_parameter_gets_no_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    (x * x).sum().backward()
    assert y.grad is None


def test_no_grad_blocks_graph_construction():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2).sum()
    assert not y.requires_grad


def test_matmul_norm_vs_finite_differences(rng):
    # [DERIVED: finite-difference oracle] on ||AB||^2
    a = random_tensor(rng, (3, 4))
    b = random_tensor(rng, (4, 2))
    check_gradients(lambda: ((a @ b) * (a @ b)).sum(), [a, b], rtol=1e-4)


def test_elementwise_op_gradients(rng):
    ops = {
        "add": lambda x, y: (x + y).sum(),
        "sub": lambda x, y: (x - y).sum(),
        "mul": lambda x, y: (x * y).sum(),
        "div": lambda x, y: (x / (y * y + 1.0)).sum(),
        "exp": lambda x, y: (x.exp() + y).sum(),
        "log": lambda x, y: ((x * x + 1.0).log() * y).sum(),
        "sqrt": lambda x, y: ((x * x + 1.0).sqrt() * y).sum(),
        "tanh": lambda x, y: (x.tanh() * y).sum(),
        "relu": lambda x, y: ((x + 0.3).relu() * y).sum(),
        "elu": lambda x, y: (x.elu() * y).sum(),
        "gelu": lambda x, y: (x.gelu() * y).sum(),
        "pow": lambda x, y: ((x * x + 0.5) ** 1.5 + y).sum(),
        "mean": lambda x, y: (x * y).mean(),
        "reshape": lambda x, y: (x.reshape(6) * y.reshape(6)).sum(),
        "getitem": lambda x, y: (x[0] * y[1]).sum(),
        "swapaxes": lambda x, y: (x.swapaxes(0, 1) @ y).sum(),
    }
    for name, op in ops.items():
        x = random_tensor(rng, (2, 3))
        y = random_tensor(rng, (2, 3))
        check_gradients(lambda: op(x, y), [x, y])


def test_broadcast_gradients(rng):
    x = random_tensor(rng, (3, 4))
    b = random_tensor(rng, (4,))
    s = random_tensor(rng, (3, 1))
    check_gradients(lambda: ((x + b) * s).sum(), [x, b, s])


def test_softmax_and_layer_norm_gradients(rng):
    x = random_tensor(rng, (3, 5))
    g = random_tensor(rng, (5,))
    b = random_tensor(rng, (5,))
    w = random_tensor(rng, (3, 5))
    check_gradients(lambda: (softmax(x) * w).sum(), [x, w])
    check_gradients(lambda: (layer_norm(x, g, b) * w).sum(), [x, g, b, w])
    check_gradients(lambda: (log_softmax(x) * w).sum(), [x, w])


def test_concat_and_gather_gradients(rng):
    a = random_tensor(rng, (2, 3))
    b = random_tensor(rng, (4, 3))
    idx = np.array([0, 3, 3, 1])
    check_gradients(lambda: (concat([a, b], axis=0) ** 2).sum(), [a, b])
    check_gradients(lambda: (gather_rows(b, idx) * 1.5).sum(), [b])


def test_layer_norm_oracle(rng):
    # [DERIVED: scalar-loop oracle]
    x = rng.normal(size=(3, 8))
    gamma = rng.normal(size=8)
    beta = rng.normal(size=8)
    got = layer_norm(Tensor(x, dtype=np.float64), Tensor(gamma, dtype=np.float64),
                     Tensor(beta, dtype=np.float64), eps=1e-12).data
    for i in range(3):
        mu = sum(x[i]) / 8
        var = sum((v - mu) ** 2 for v in x[i]) / 8
        for j in range(8):
            want = (x[i, j] - mu) / np.sqrt(var + 1e-12) * gamma[j] + beta[j]
            assert abs(got[i, j] - want) < 1e-6


def test_layer_norm_trivial_cases():
    g = Tensor(np.ones(4))
    b = Tensor(np.zeros(4))
    out = layer_norm(Tensor(np.full((2, 4), 7.0)), g, b).data
    assert np.abs(out).max() < 1e-3   # constant vector -> zeros
    two = layer_norm(Tensor(np.array([[1.0, 3.0]])), Tensor(np.ones(2)),
                     Tensor(np.zeros(2)), eps=1e-12).data
    assert np.allclose(two, [[-1.0, 1.0]], atol=1e-5)


def test_cross_entropy_matches_loop_oracle(rng):
    logits = rng.normal(size=(5, 4))
    labels = rng.integers(0, 4, size=5)
    got = cross_entropy(Tensor(logits, dtype=np.float64), labels).item()
    want = 0.0
    for i in range(5):
        e = np.exp(logits[i] - logits[i].max())
        want -= np.log(e[labels[i]] / e.sum())
    assert got == pytest.approx(want / 5, abs=1e-10)


def test_cross_entropy_contract_errors():
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.ones(3)), np.array([0]))
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.ones((2, 3))), np.array([0, 3]))


def test_one_hot():
    out = one_hot(np.array([0, 2]), 3)
    assert np.array_equal(out, [[1, 0, 0], [0, 0, 1]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_gradcheck_random_small_graphs(seed):
    # property form of the finite-difference invariant
    rng = np.random.default_rng(seed)
    x = random_tensor(rng, (2, 3))
    w = random_tensor(rng, (3, 3))

    def loss():
        h = (x @ w).tanh()
        return (softmax(h) * h.exp()).mean()

    check_gradients(loss, [x, w])


def test_forward_outputs_finite_on_finite_inputs(rng):
    x = Tensor(rng.normal(size=(4, 4)).astype(np.float32), requires_grad=True)
    y = softmax((x @ x).gelu().tanh())
    assert np.isfinite(y.data).all()
