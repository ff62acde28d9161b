"""Forward projector and its transpose against analytic line integrals."""

import numpy as np
import pytest

from cbctnet import ConeBeamGeometry, VolumeGrid, equiangular_angles
from cbctnet.autodiff import Tensor
from cbctnet.containers import ProjectionStack, Volume
from cbctnet.projector import (
    adjoint_test,
    backproject_stack,
    forward_project,
    project_layer,
    project_volume,
    transpose_project,
)


def cube_volume(grid, value=0.01):
    return np.full(grid.shape, value)


def test_central_ray_through_cube():
    # A uniform cube of attenuation mu: the central ray at angle 0 crosses
    # the full x extent, so the line integral is mu * nx * voxel.
    grid = VolumeGrid(16, 16, 16, 2.0)
    geom = ConeBeamGeometry(200.0, 400.0, 5, 5, 1.0, (0.0,))  # odd detector: exact center
    mu = 0.01
    proj = forward_project(cube_volume(grid, mu), grid, geom)
    expected = mu * 16 * 2.0
    center = proj[0, 2, 2]
    assert abs(center - expected) / expected < 1e-2


def test_central_ray_all_angles():
    grid = VolumeGrid(16, 16, 16, 2.0)
    geom = ConeBeamGeometry(200.0, 400.0, 3, 3, 1.0, equiangular_angles(8))
    proj = forward_project(cube_volume(grid, 0.01), grid, geom)
    # at 45 degrees the central ray crosses the diagonal: longer path
    assert proj[1, 1, 1] > proj[0, 1, 1]
    np.testing.assert_allclose(proj[0, 1, 1], proj[2, 1, 1], rtol=1e-6)  # 0 vs 90 deg
    np.testing.assert_allclose(proj[1, 1, 1], proj[3, 1, 1], rtol=1e-6)  # 45 vs 135 deg


def test_ray_missing_support_is_zero():
    grid = VolumeGrid(8, 8, 8, 1.0)  # 8 mm cube at iso
    geom = ConeBeamGeometry(100.0, 200.0, 21, 21, 4.0, (0.0,))
    proj = forward_project(np.ones(grid.shape), grid, geom)
    # corner pixels are 40+ mm off axis: rays pass far outside the support
    assert proj[0, 0, 0] == 0.0
    assert proj[0, -1, -1] == 0.0
    assert proj[0, 10, 10] > 0.0


def test_linearity(rng, small_geom, small_grid):
    a = rng.standard_normal(small_grid.shape)
    b = rng.standard_normal(small_grid.shape)
    pa = forward_project(a, small_grid, small_geom)
    pb = forward_project(b, small_grid, small_geom)
    pab = forward_project(2.0 * a - 3.0 * b, small_grid, small_geom)
    np.testing.assert_allclose(pab, 2.0 * pa - 3.0 * pb, rtol=1e-10, atol=1e-12)


def test_adjointness_small_f64(small_geom, small_grid):
    assert adjoint_test(small_geom, small_grid, seed=0) < 1e-10


def test_adjointness_rectangular_grid():
    geom = ConeBeamGeometry(80.0, 180.0, 5, 7, 3.0, equiangular_angles(3))
    grid = VolumeGrid(6, 5, 4, 2.5)
    assert adjoint_test(geom, grid, seed=1) < 1e-10


def test_transpose_shapes(rng, small_geom, small_grid):
    y = rng.standard_normal((small_geom.n_views, small_geom.det_rows, small_geom.det_cols))
    out = transpose_project(y, small_geom, small_grid)
    assert out.shape == small_grid.shape


def test_forward_validates_shape(small_geom, small_grid):
    with pytest.raises(ValueError):
        forward_project(np.ones((4, 4, 4)), small_grid, small_geom)


def test_container_round_trip(small_geom, small_grid):
    vol = Volume(np.full(small_grid.shape, 0.02), small_grid.voxel_mm, unit="mu")
    stack = project_volume(vol, small_grid, small_geom)
    assert isinstance(stack, ProjectionStack)
    assert stack.geometry is small_geom
    back = backproject_stack(stack, small_grid)
    assert back.values.shape == small_grid.shape
    assert back.unit == "mu"


def test_project_layer_matches_kernel(rng, small_geom, small_grid):
    x = rng.standard_normal((1, 2) + small_grid.shape)
    out = project_layer(Tensor(x), small_geom, small_grid)
    assert out.shape == (1, 2, small_geom.n_views, small_geom.det_rows, small_geom.det_cols)
    for ch in range(2):
        ref = forward_project(x[0, ch], small_grid, small_geom)
        np.testing.assert_allclose(out.data[0, ch], ref, rtol=1e-12)


def test_project_layer_gradient_is_transpose(rng, small_geom, small_grid):
    # d/dx sum(P x * w) = P^T w: linear op, gradient must equal the splat
    x = Tensor(rng.standard_normal((1, 1) + small_grid.shape), requires_grad=True)
    w = rng.standard_normal((small_geom.n_views, small_geom.det_rows, small_geom.det_cols))
    (project_layer(x, small_geom, small_grid) * Tensor(w[None, None])).sum().backward()
    ref = transpose_project(w, small_geom, small_grid)
    np.testing.assert_allclose(x.grad[0, 0], ref, rtol=1e-12, atol=1e-14)


def test_voxel_size_scales_integrals():
    g1 = VolumeGrid(8, 8, 8, 1.0)
    g2 = VolumeGrid(8, 8, 8, 2.0)
    geom = ConeBeamGeometry(200.0, 300.0, 3, 3, 1.0, (0.0,))
    p1 = forward_project(np.ones(g1.shape), g1, geom)[0, 1, 1]
    p2 = forward_project(np.ones(g2.shape), g2, geom)[0, 1, 1]
    assert p2 == pytest.approx(2.0 * p1, rel=5e-3)


def test_f32_path(small_geom, small_grid, rng):
    x = rng.standard_normal(small_grid.shape).astype(np.float32)
    out = forward_project(x, small_grid, small_geom)
    assert out.dtype == np.float32
    err = adjoint_test(small_geom, small_grid, seed=2, dtype=np.float32)
    assert err < 1e-4
