"""Adam optimizer operating on named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    """Moment estimates and step counter for Adam.

    ``m`` and ``v`` are keyed by parameter name and created lazily on the
    first step so the state can be constructed before the model.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """Apply one Adam update in place.

    ``grads`` must carry an entry for every parameter. Updates use
    bias-corrected first and second moments and the update
    ``p -= lr * m_hat / (sqrt(v_hat) + eps)``. Moments live in the
    parameter dtype so optimizer state survives checkpoint round trips
    bit-exactly.
    """
    missing = [k for k in params if k not in grads]
    if missing:
        raise ValueError(f"adam_step missing gradients for: {sorted(missing)}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        dt = p.data.dtype
        g = np.asarray(grads[name], dtype=dt)
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros(p.data.shape, dtype=dt)
            v = np.zeros(p.data.shape, dtype=dt)
            state.m[name] = m
            state.v[name] = v
        else:
            v = state.v[name]
        m *= dt.type(b1)
        m += dt.type(1.0 - b1) * g
        v *= dt.type(b2)
        v += dt.type(1.0 - b2) * (g * g)
        update = dt.type(state.lr / c1) * m / (np.sqrt(v / c2) + dt.type(state.eps))
        p.data -= update
