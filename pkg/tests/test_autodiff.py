import numpy as np
import pytest

from deepunfold.mrf.autodiff import Tensor, as_tensor, parameter, stack
from oracles import central_difference, rel_err

rng = np.random.default_rng(0)
X0 = rng.standard_normal((3, 4))
Y0 = rng.standard_normal((4,))
M0 = rng.standard_normal((4, 2))

UNARY = {
    "exp": lambda t: t.exp(),
    "log": lambda t: (t * t + 1.0).log(),
    "logistic": lambda t: t.logistic(),
    "log_logistic": lambda t: t.log_logistic(),
    "logsumexp": lambda t: t.logsumexp(axis=1),
    "logsumexp_keep": lambda t: t.logsumexp(axis=0, keepdims=True) * 2.0,
    "sum_axis": lambda t: t.sum(axis=0) * t.sum(axis=0),
    "getitem": lambda t: t[[0, 0, 2], 1:3] * 3.0,
    "transpose": lambda t: t.T @ as_tensor(np.ones((3, 2))),
    "reshape": lambda t: t.reshape(2, 6).exp(),
    "neg_sub": lambda t: 1.0 - (-t) * t,
    "div": lambda t: 1.0 / (t * t + 2.0),
    "matmul": lambda t: t @ as_tensor(M0),
    "broadcast": lambda t: (t + as_tensor(Y0)) * as_tensor(Y0[None, :]),
    "stack": lambda t: stack([t.exp(), t * 2.0], axis=0).logsumexp(axis=0),
    "max": lambda t: (t * 1.0).max(axis=1),
}


def weighted(fn, X, W):
    return float((fn(as_tensor(X)).value * W).sum())


@pytest.mark.parametrize("name", sorted(UNARY))
def test_op_gradient_matches_fd(name):
    fn = UNARY[name]
    W = rng.standard_normal(fn(as_tensor(X0)).shape)
    p = parameter(X0)
    (fn(p) * as_tensor(W)).sum().backward()
    num = central_difference(lambda X: weighted(fn, X, W), X0)
    assert rel_err(p.grad, num) < 1e-7


def test_second_operand_gradients():
    a = parameter(X0)
    b = parameter(Y0)
    m = parameter(M0)
    ((a * b) @ m).sum().backward()
    np.testing.assert_allclose(m.grad, (X0 * Y0).T @ np.ones((3, 2)))
    np.testing.assert_allclose(b.grad, (np.ones((3, 2)) @ M0.T * X0).sum(axis=0))


def test_reused_node_accumulates():
    p = parameter(2.0)
    y = p * p + p
    y.backward()
    assert float(p.grad) == 5.0


def test_constants_have_no_grad():
    c = as_tensor(np.ones(3))
    p = parameter(np.ones(3))
    (c * p).sum().backward()
    assert c.grad is None and not c.requires_grad
    np.testing.assert_array_equal(p.grad, 1.0)


def test_numpy_defers_to_tensor():
    p = parameter(np.ones(2))
    out = np.ones(2) * p
    assert isinstance(out, Tensor)


def test_deep_chain_does_not_recurse():
    p = parameter(0.0)
    y = p
    for _ in range(5000):
        y = y + 1.0
    y.backward()
    assert float(p.grad) == 1.0
