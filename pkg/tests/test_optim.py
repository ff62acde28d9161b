"""Adam update rule against its closed form and a reference loop."""

import numpy as np
import pytest

from cbctnet.autodiff import Tensor
from cbctnet.optim import AdamState, adam_step


def test_first_step_closed_form():
    # with bias correction, step 1 reduces to lr * g / (|g| + eps)
    g = np.array([0.3, -2.0, 1e-12, 0.0])
    p = Tensor(np.zeros(4))
    state = AdamState(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8)
    adam_step({"p": p}, {"p": g}, state)
    expected = -1e-3 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-12, atol=0)
    assert state.step == 1


def test_matches_reference_implementation(rng):
    shapes = {"w": (3, 2), "b": (2,)}
    params = {k: Tensor(rng.standard_normal(s)) for k, s in shapes.items()}
    ref = {k: params[k].data.copy() for k in params}
    m = {k: np.zeros(s) for k, s in shapes.items()}
    v = {k: np.zeros(s) for k, s in shapes.items()}
    lr, b1, b2, eps = 2e-3, 0.9, 0.999, 1e-8
    state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps)
    for t in range(1, 8):
        grads = {k: rng.standard_normal(s) for k, s in shapes.items()}
        adam_step(params, grads, state)
        for k in ref:
            m[k] = b1 * m[k] + (1 - b1) * grads[k]
            v[k] = b2 * v[k] + (1 - b2) * grads[k] ** 2
            mh = m[k] / (1 - b1 ** t)
            vh = v[k] / (1 - b2 ** t)
            ref[k] -= lr * mh / (np.sqrt(vh) + eps)
    for k in ref:
        np.testing.assert_allclose(params[k].data, ref[k], rtol=1e-10)


def test_moments_stay_in_param_dtype():
    p = Tensor(np.zeros(3, dtype=np.float32))
    state = AdamState()
    adam_step({"p": p}, {"p": np.ones(3)}, state)
    assert state.m["p"].dtype == np.float32
    assert state.v["p"].dtype == np.float32
    assert p.data.dtype == np.float32


def test_missing_gradient_rejected():
    p = Tensor(np.zeros(2))
    with pytest.raises(ValueError):
        adam_step({"p": p}, {}, AdamState())


def test_gradient_shape_rejected():
    p = Tensor(np.zeros(2))
    with pytest.raises(ValueError):
        adam_step({"p": p}, {"p": np.zeros(3)}, AdamState())


def test_descends_simple_quadratic():
    p = Tensor(np.array([5.0]))
    state = AdamState(lr=0.1)
    for _ in range(200):
        adam_step({"p": p}, {"p": 2.0 * p.data}, state)
    assert abs(p.data[0]) < 0.05
