"""Differentiable volumetric network layers.

All layers operate on tensors whose last three axes are spatial
(depth, height, width) with a channel axis in front of them. Inputs may
be rank 4 ``(C, D, H, W)`` or rank 5 ``(N, C, D, H, W)``; rank-4 inputs
are treated as a single-sample batch and returned without the batch
axis. Convolutions are cross-correlations with zero padding that
preserves the spatial shape.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, make_op


def _lift(x: Tensor, name: str) -> tuple[Tensor, bool]:
    if x.ndim == 4:
        return x.reshape((1,) + x.shape), False
    if x.ndim == 5:
        return x, True
    raise ValueError(f"{name} expects a (C,D,H,W) or (N,C,D,H,W) tensor, got rank {x.ndim}")


def _drop(y: Tensor, batched: bool) -> Tensor:
    return y if batched else y.reshape(y.shape[1:])


# ---------------------------------------------------------------------------
# convolution


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """3D cross-correlation with odd kernel and same-size zero padding.

    ``weight`` has shape ``(C_out, C_in, k, k, k)``, ``bias`` shape
    ``(C_out,)`` or None.
    """
    x5, batched = _lift(x, "conv3d")
    w = weight.data
    if w.ndim != 5 or w.shape[2] != w.shape[3] or w.shape[3] != w.shape[4]:
        raise ValueError(f"conv3d weight must be (C_out, C_in, k, k, k), got {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ValueError(f"conv3d kernel size must be odd, got {k}")
    if x5.shape[1] != w.shape[1]:
        raise ValueError(f"conv3d channel mismatch: input has {x5.shape[1]} channels, weight expects {w.shape[1]}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ValueError(f"conv3d bias must be ({w.shape[0]},), got {bias.shape}")

    n, ci, d, h, wd = x5.shape
    co = w.shape[0]
    p = (k - 1) // 2
    xd = x5.data
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    out = np.zeros((n, co, d, h, wd), dtype=xd.dtype)
    for kz in range(k):
        for ky in range(k):
            for kx in range(k):
                view = xp[:, :, kz:kz + d, ky:ky + h, kx:kx + wd]
                # (co,ci) x (n,ci,d,h,w) -> (co,n,d,h,w)
                out += np.tensordot(w[:, :, kz, ky, kx], view, axes=(1, 1)).transpose(1, 0, 2, 3, 4)
    if bias is not None:
        out += bias.data.reshape(1, co, 1, 1, 1)

    parents = [x5, weight] + ([bias] if bias is not None else [])

    def grad_fn(g: np.ndarray):
        gw = np.empty_like(w)
        gxp = np.zeros_like(xp)
        for kz in range(k):
            for ky in range(k):
                for kx in range(k):
                    view = xp[:, :, kz:kz + d, ky:ky + h, kx:kx + wd]
                    gw[:, :, kz, ky, kx] = np.tensordot(g, view, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
                    gxp[:, :, kz:kz + d, ky:ky + h, kx:kx + wd] += np.tensordot(
                        w[:, :, kz, ky, kx], g, axes=(0, 1)
                    ).transpose(1, 0, 2, 3, 4)
        gx = gxp[:, :, p:p + d, p:p + h, p:p + wd]
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2, 3, 4))
        return gx, gw

    y5 = make_op(out, parents, grad_fn, "conv3d")
    return _drop(y5, batched)


# ---------------------------------------------------------------------------
# normalization


def batchnorm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over the batch and spatial axes.

    In training mode the batch statistics (biased variance) normalize the
    input and the running buffers are updated in place with
    ``(1 - momentum) * old + momentum * batch``. In eval mode the running
    buffers are used and the op is a fixed affine map.
    """
    x5, batched = _lift(x, "batchnorm3d")
    c = x5.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (c,):
            raise ValueError(f"batchnorm3d {name} must have shape ({c},), got {t.shape}")
    axes = (0, 2, 3, 4)
    xd = x5.data
    shape = (1, c, 1, 1, 1)

    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)  # biased
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    m = xd.size // c

    def grad_fn(g: np.ndarray):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gamma.data.reshape(shape)
        if training:
            gx = (
                gxhat
                - gxhat.mean(axis=axes).reshape(shape)
                - xhat * (gxhat * xhat).mean(axis=axes).reshape(shape)
            ) * inv_std.reshape(shape)
        else:
            gx = gxhat * inv_std.reshape(shape)
        return gx, ggamma, gbeta

    y5 = make_op(out, (x5, gamma, beta), grad_fn, "batchnorm3d")
    return _drop(y5, batched)


# ---------------------------------------------------------------------------
# activations


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Channel-wise parametric ReLU: ``x`` where positive, ``a*x`` otherwise."""
    x5, batched = _lift(x, "prelu")
    c = x5.shape[1]
    if slope.shape != (c,):
        raise ValueError(f"prelu slope must have shape ({c},), got {slope.shape}")
    xd = x5.data
    a = slope.data.reshape(1, c, 1, 1, 1)
    neg = xd < 0
    out = np.where(neg, a * xd, xd)

    def grad_fn(g: np.ndarray):
        gx = np.where(neg, a * g, g)
        ga = (g * np.where(neg, xd, 0.0)).sum(axis=(0, 2, 3, 4))
        return gx, ga

    y5 = make_op(out, (x5, slope), grad_fn, "prelu")
    return _drop(y5, batched)


# ---------------------------------------------------------------------------
# resampling


def avgpool3d(x: Tensor) -> Tensor:
    """2x2x2 average pooling with stride 2. Spatial dims must be even."""
    x5, batched = _lift(x, "avgpool3d")
    n, c, d, h, w = x5.shape
    if d % 2 or h % 2 or w % 2:
        raise ValueError(f"avgpool3d requires even spatial dims, got {(d, h, w)}")
    xd = x5.data
    r = xd.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
    out = r.mean(axis=(3, 5, 7))

    def grad_fn(g: np.ndarray):
        gx = np.empty_like(xd)
        gr = gx.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
        gr[:] = (g / 8.0)[:, :, :, None, :, None, :, None]
        return (gx,)

    y5 = make_op(out, (x5,), grad_fn, "avgpool3d")
    return _drop(y5, batched)


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """Dense (2n, n) trilinear x2 interpolation matrix along one axis.

    Half-sample alignment (align_corners off) with border replication:
    output sample o maps to source coordinate (o + 0.5)/2 - 0.5.
    """
    m = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        s = (o + 0.5) / 2.0 - 0.5
        i0 = int(np.floor(s))
        lam = s - i0
        i0c = min(max(i0, 0), n - 1)
        i1c = min(max(i0 + 1, 0), n - 1)
        m[o, i0c] += 1.0 - lam
        m[o, i1c] += lam
    return m


def _apply_axis(arr: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(arr, axis, -1)
    out = moved @ m.T
    return np.moveaxis(out, -1, axis)


def upsample_trilinear(x: Tensor) -> Tensor:
    """Trilinear x2 upsampling (half-sample offsets, replicated borders)."""
    x5, batched = _lift(x, "upsample_trilinear")
    _, _, d, h, w = x5.shape
    dt = x5.data.dtype
    mats = [_upsample_matrix(n, dt) for n in (d, h, w)]
    out = x5.data
    for axis, m in zip((2, 3, 4), mats):
        out = _apply_axis(out, m, axis)

    def grad_fn(g: np.ndarray):
        gx = g
        for axis, m in zip((2, 3, 4), mats):
            gx = _apply_axis(gx, m.T, axis)
        return (gx,)

    y5 = make_op(out, (x5,), grad_fn, "upsample_trilinear")
    return _drop(y5, batched)


# ---------------------------------------------------------------------------
# channel plumbing


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis. All other dims must match."""
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    lifted = [_lift(t, "concat_channels") for t in tensors]
    batched = lifted[0][1]
    xs = [t for t, _ in lifted]
    ref = xs[0].shape
    for t in xs[1:]:
        s = t.shape
        if s[0] != ref[0] or s[2:] != ref[2:]:
            raise ValueError(f"concat_channels shape mismatch: {ref} vs {s}")
    sizes = [t.shape[1] for t in xs]
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g: np.ndarray):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    y5 = make_op(out, xs, grad_fn, "concat_channels")
    return _drop(y5, batched)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Select channels ``[start, stop)``."""
    x5, batched = _lift(x, "slice_channels")
    c = x5.shape[1]
    if not (0 <= start < stop <= c):
        raise ValueError(f"slice_channels range [{start},{stop}) invalid for {c} channels")
    out = x5.data[:, start:stop].copy()

    def grad_fn(g: np.ndarray):
        gx = np.zeros_like(x5.data)
        gx[:, start:stop] = g
        return (gx,)

    y5 = make_op(out, (x5,), grad_fn, "slice_channels")
    return _drop(y5, batched)


# ---------------------------------------------------------------------------
# loss


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; subgradient 0 at exact ties."""
    target_t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.data.dtype))
    if pred.shape != target_t.shape:
        raise ValueError(f"l1_loss shape mismatch: {pred.shape} vs {target_t.shape}")
    diff = pred.data - target_t.data
    out = np.asarray(np.abs(diff).mean(), dtype=pred.data.dtype)
    n = diff.size

    def grad_fn(g: np.ndarray):
        s = np.sign(diff) * (g / n)
        return s, -s

    return make_op(out, (pred, target_t), grad_fn, "l1_loss")
