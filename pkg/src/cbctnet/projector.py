"""Ray-driven cone-beam forward projection and its algebraic transpose.

The forward operator marches each source-to-pixel ray across the
volume's trilinear support box with fixed step ``voxel_mm / 2``
(midpoint rule, plus one midpoint sample over the remainder segment)
and integrates trilinearly interpolated values. The transpose scatters
the very same interpolation weights, so ``<Ax, y> == <x, A^T y>`` holds
to floating-point roundoff.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .autodiff import Tensor, make_op
from .containers import ProjectionStack, Volume
from .geometry import ConeBeamGeometry, VolumeGrid


def _check_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"projector supports float32/float64, got {dt}")
    return dt


def forward_project(values: np.ndarray, grid: VolumeGrid, geom: ConeBeamGeometry,
                    step_mm: float | None = None) -> np.ndarray:
    """Project a volume array (z, y, x) to line integrals (view, row, col)."""
    values = np.ascontiguousarray(values)
    dt = _check_dtype(values.dtype)
    if values.shape != grid.shape:
        raise ValueError(f"volume shape {values.shape} does not match grid {grid.shape}")
    step = grid.voxel_mm / 2.0 if step_mm is None else float(step_mm)
    if step <= 0:
        raise ValueError("step_mm must be positive")
    bx, by, bz = grid.support_halfwidths()
    out = np.zeros((geom.n_views, geom.det_rows, geom.det_cols), dtype=dt)
    for i in range(geom.n_views):
        src, center, u_axis, v_axis = geom.view_pose(i)
        _kernels.march_view_forward(
            values, grid.voxel_mm, bx, by, bz,
            src[0], src[1], src[2], center[0], center[1], center[2],
            u_axis[0], u_axis[1], u_axis[2], v_axis[0], v_axis[1], v_axis[2],
            geom.det_pixel_mm, step, out[i],
        )
    return out


def transpose_project(proj: np.ndarray, geom: ConeBeamGeometry, grid: VolumeGrid,
                      step_mm: float | None = None) -> np.ndarray:
    """Exact transpose of :func:`forward_project` (splat, not FDK)."""
    proj = np.ascontiguousarray(proj)
    dt = _check_dtype(proj.dtype)
    expected = (geom.n_views, geom.det_rows, geom.det_cols)
    if proj.shape != expected:
        raise ValueError(f"projection shape {proj.shape} does not match geometry {expected}")
    step = grid.voxel_mm / 2.0 if step_mm is None else float(step_mm)
    if step <= 0:
        raise ValueError("step_mm must be positive")
    bx, by, bz = grid.support_halfwidths()
    out = np.zeros(grid.shape, dtype=dt)
    for i in range(geom.n_views):
        src, center, u_axis, v_axis = geom.view_pose(i)
        _kernels.march_view_splat(
            proj[i], grid.voxel_mm, bx, by, bz,
            src[0], src[1], src[2], center[0], center[1], center[2],
            u_axis[0], u_axis[1], u_axis[2], v_axis[0], v_axis[1], v_axis[2],
            geom.det_pixel_mm, step, out,
        )
    return out


def project_volume(volume: Volume, grid: VolumeGrid, geom: ConeBeamGeometry) -> ProjectionStack:
    """Container-level forward projection."""
    if volume.shape != grid.shape:
        raise ValueError(f"volume shape {volume.shape} does not match grid {grid.shape}")
    if abs(volume.voxel_mm - grid.voxel_mm) > 1e-9:
        raise ValueError(f"volume spacing {volume.voxel_mm} does not match grid {grid.voxel_mm}")
    return ProjectionStack(forward_project(volume.values.astype(np.float64), grid, geom), geom)


def backproject_stack(stack: ProjectionStack, grid: VolumeGrid) -> Volume:
    """Container-level transpose projection."""
    vals = transpose_project(stack.values.astype(np.float64), stack.geometry, grid)
    return Volume(vals, grid.voxel_mm, unit="mu")


# ---------------------------------------------------------------------------
# autodiff layer


def project_layer(x: Tensor, geom: ConeBeamGeometry, grid: VolumeGrid) -> Tensor:
    """Differentiable per-channel projection of (..., C, nz, ny, nx) tensors.

    Accepts rank 4 (C, nz, ny, nx) or rank 5 (N, C, nz, ny, nx); the
    spatial block is replaced by (n_views, det_rows, det_cols). Backward
    applies the exact transpose per channel.
    """
    if x.ndim not in (4, 5):
        raise ValueError(f"project_layer expects rank 4 or 5, got {x.ndim}")
    lead = x.shape[:-3]
    if x.shape[-3:] != grid.shape:
        raise ValueError(f"project_layer spatial shape {x.shape[-3:]} does not match grid {grid.shape}")
    flat = x.data.reshape((-1,) + grid.shape)
    out = np.stack([forward_project(v, grid, geom) for v in flat])
    out = out.reshape(lead + (geom.n_views, geom.det_rows, geom.det_cols))

    def grad_fn(g: np.ndarray):
        gflat = g.reshape((-1, geom.n_views, geom.det_rows, geom.det_cols))
        gx = np.stack([transpose_project(p, geom, grid) for p in gflat])
        return (gx.reshape(x.shape),)

    return make_op(out, (x,), grad_fn, "project")


# ---------------------------------------------------------------------------
# adjointness harness


def adjoint_test(geom: ConeBeamGeometry, grid: VolumeGrid, seed: int = 0,
                 dtype=np.float64) -> float:
    """Relative adjointness error |<Ax,y> - <x,A'y>| / max(|<Ax,y>|, tiny)."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(grid.shape).astype(dtype)
    y = rng.standard_normal((geom.n_views, geom.det_rows, geom.det_cols)).astype(dtype)
    ax = forward_project(x, grid, geom)
    aty = transpose_project(y, geom, grid)
    lhs = float(np.vdot(ax.astype(np.float64), y.astype(np.float64)))
    rhs = float(np.vdot(x.astype(np.float64), aty.astype(np.float64)))
    return abs(lhs - rhs) / max(abs(lhs), 1e-30)
