"""Core tensor engine: values, gradients, graph mechanics."""

import numpy as np
import pytest

from cbctnet.autodiff import Tensor, as_tensor, collect_graph_ops, grad_enabled, make_op, no_grad


def test_tensor_wraps_array():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert t.shape == (2, 3)
    assert t.dtype == np.float64
    assert not t.requires_grad
    assert t.grad is None


def test_scalar_item():
    t = Tensor(np.array(3.5))
    assert t.item() == 3.5
    with pytest.raises(ValueError):
        Tensor(np.ones(3)).item()


def test_add_mul_values(rng):
    a, b = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
    ta, tb = Tensor(a), Tensor(b)
    np.testing.assert_array_equal((ta + tb).data, a + b)
    np.testing.assert_array_equal((ta * tb).data, a * b)
    np.testing.assert_array_equal((ta - tb).data, a - b)
    np.testing.assert_array_equal((ta * 2.5).data, a * 2.5)
    np.testing.assert_array_equal((ta / 2.0).data, a / 2.0)
    np.testing.assert_array_equal((-ta).data, -a)


def test_backward_requires_scalar():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (t * 2.0).backward()


def test_add_backward(rng):
    a = Tensor(rng.standard_normal(5), requires_grad=True)
    b = Tensor(rng.standard_normal(5), requires_grad=True)
    (a + b).sum().backward()
    np.testing.assert_array_equal(a.grad, np.ones(5))
    np.testing.assert_array_equal(b.grad, np.ones(5))


def test_mul_backward(rng):
    x = rng.standard_normal(4)
    y = rng.standard_normal(4)
    a, b = Tensor(x, requires_grad=True), Tensor(y, requires_grad=True)
    (a * b).sum().backward()
    np.testing.assert_allclose(a.grad, y, rtol=0, atol=0)
    np.testing.assert_allclose(b.grad, x, rtol=0, atol=0)


def test_mean_and_reshape_backward():
    a = Tensor(np.arange(8.0), requires_grad=True)
    a.reshape((2, 4)).mean().backward()
    np.testing.assert_allclose(a.grad, np.full(8, 1.0 / 8.0))


def test_scalar_div_backward():
    a = Tensor(np.array([2.0, 4.0]), requires_grad=True)
    (a / 4.0).sum().backward()
    np.testing.assert_allclose(a.grad, [0.25, 0.25])


def test_grad_accumulates_on_reuse():
    # x appears twice; contributions must add, not overwrite
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = (x * 2.0 + x * 5.0).sum()
    y.backward()
    np.testing.assert_allclose(x.grad, [7.0])


def test_diamond_graph_topological_order():
    # d = (a+a) * (a+1); gradient must combine both paths exactly once
    a = Tensor(np.array([2.0]), requires_grad=True)
    left = a + a
    right = a + Tensor(np.array([1.0]))
    (left * right).sum().backward()
    # d/da [2a * (a+1)] = 4a + 2 = 10
    np.testing.assert_allclose(a.grad, [10.0])


def test_deep_chain_does_not_recurse():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + x
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [5001.0])


def test_broadcast_unbroadcast():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones((1, 4)), requires_grad=True)
    (a * b).sum().backward()
    assert a.grad.shape == (3, 4)
    assert b.grad.shape == (1, 4)
    np.testing.assert_allclose(b.grad, np.full((1, 4), 3.0))


def test_no_grad_suppresses_graph():
    a = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        assert not grad_enabled()
        y = a * 2.0
    assert y._parents == ()
    assert not y.requires_grad
    assert grad_enabled()


def test_graph_pruned_without_requires_grad():
    a = Tensor(np.ones(3))
    b = Tensor(np.ones(3))
    y = a + b
    assert y._parents == ()


def test_zero_grad_clears():
    a = Tensor(np.ones(3), requires_grad=True)
    (a * 3.0).sum().backward()
    assert a.grad is not None
    a.grad = None
    (a * 3.0).sum().backward()
    np.testing.assert_allclose(a.grad, [3.0, 3.0, 3.0])


def test_as_tensor_passthrough_and_cast():
    t = Tensor(np.ones(2))
    assert as_tensor(t) is t
    u = as_tensor([1, 2], dtype=np.float32)
    assert u.dtype == np.float32


def test_make_op_custom_gradient():
    a = Tensor(np.array([2.0, -3.0]), requires_grad=True)
    out = make_op(a.data ** 2, (a,), lambda g: (2.0 * a.data * g,), "square")
    out.sum().backward()
    np.testing.assert_allclose(a.grad, [4.0, -6.0])
    assert "square" in collect_graph_ops(out)


def test_finite_difference_composite(rng):
    # f(x) = mean((x * x - x) / 2); check every coordinate numerically
    x0 = rng.standard_normal(6)

    def f(arr):
        t = Tensor(arr, requires_grad=True)
        return ((t * t - t) / 2.0).mean(), t

    loss, t = f(x0.copy())
    loss.backward()
    eps = 1e-6
    for i in range(6):
        xp, xm = x0.copy(), x0.copy()
        xp[i] += eps
        xm[i] -= eps
        fd = (f(xp)[0].item() - f(xm)[0].item()) / (2 * eps)
        assert abs(fd - t.grad[i]) <= 1e-8 * max(1.0, abs(fd))
