"""Synthetic anatomy, augmentation, and scan simulation.

Phantoms are stacked axis-aligned ellipsoids in HU: an elliptical body
of soft tissue, two lung-like inclusions, a handful of random soft
blobs, and one or more bone-range inclusions. Later entries overwrite
earlier ones. All randomness comes from the integer seed, so the same
seed always yields the same phantom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .containers import ProjectionStack, Volume, hu_to_mu
from .geometry import ConeBeamGeometry, VolumeGrid, sparse_subsample
from .projector import forward_project

AIR_HU = -1000.0


@dataclass(frozen=True)
class Ellipsoid:
    center_mm: tuple[float, float, float]
    semiaxes_mm: tuple[float, float, float]
    value_hu: float
    label: str


@dataclass(frozen=True)
class PhantomSpec:
    """Ordered ellipsoid list; later entries overwrite earlier ones."""

    ellipsoids: tuple[Ellipsoid, ...]

    def by_label(self, label: str) -> tuple[Ellipsoid, ...]:
        return tuple(e for e in self.ellipsoids if e.label == label)


def _draw_spec(rng: np.random.Generator, grid: VolumeGrid) -> PhantomSpec:
    ex, ey, ez = grid.extent_mm
    extent = np.array([ex, ey, ez])
    min_semi = 1.2 * grid.voxel_mm

    body_a = rng.uniform(0.30, 0.42, size=3) * extent
    body_c = rng.uniform(-0.04, 0.04, size=3) * extent
    body_c = np.clip(body_c, -(0.48 * extent - body_a), 0.48 * extent - body_a)
    parts = [Ellipsoid(tuple(body_c), tuple(body_a), float(rng.uniform(20.0, 60.0)), "body")]

    for side in (-1.0, 1.0):
        la = np.array([0.30, 0.52, 0.60]) * body_a * rng.uniform(0.85, 1.0, size=3)
        la = np.maximum(la, min_semi)
        lc = body_c + np.array([side * 0.45 * body_a[0],
                                rng.uniform(-0.05, 0.05) * body_a[1],
                                rng.uniform(-0.05, 0.05) * body_a[2]])
        parts.append(Ellipsoid(tuple(lc), tuple(la), float(rng.uniform(-850.0, -750.0)), "lung"))

    for _ in range(int(rng.integers(3, 9))):
        ba = np.maximum(rng.uniform(0.05, 0.14, size=3) * body_a, min_semi)
        bc = body_c + rng.uniform(-0.55, 0.55, size=3) * body_a
        parts.append(Ellipsoid(tuple(bc), tuple(ba), float(rng.uniform(-100.0, 100.0)), "blob"))

    for _ in range(int(rng.integers(1, 5))):
        ka = np.maximum(rng.uniform(0.04, 0.10, size=3) * body_a, min_semi)
        kc = body_c + rng.uniform(-0.60, 0.60, size=3) * body_a
        parts.append(Ellipsoid(tuple(kc), tuple(ka), float(rng.uniform(400.0, 1500.0)), "bone"))

    return PhantomSpec(tuple(parts))


def rasterize_spec(spec: PhantomSpec, grid: VolumeGrid) -> np.ndarray:
    x, y, z = grid.axis_coords()
    vol = np.full(grid.shape, AIR_HU, dtype=np.float64)
    xs = x[None, None, :]
    ys = y[None, :, None]
    zs = z[:, None, None]
    for e in spec.ellipsoids:
        cx, cy, cz = e.center_mm
        ax, ay, az = e.semiaxes_mm
        m = ((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2 + ((zs - cz) / az) ** 2 <= 1.0
        vol[m] = e.value_hu
    return vol


def draw_phantom_spec(seed: int, grid: VolumeGrid) -> PhantomSpec:
    """The ellipsoid layout :func:`generate_phantom` rasterizes for ``seed``.

    Redraws (deterministically) until the rasterization at this grid
    retains both lung-range and bone-range voxels, so every phantom
    carries the full contrast span.
    """
    for attempt in range(16):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), attempt, 0x9E3779)))
        spec = _draw_spec(rng, grid)
        vol = rasterize_spec(spec, grid)
        has_lung = bool(np.any((vol >= -900.0) & (vol <= -700.0)))
        has_bone = bool(np.any(vol >= 400.0))
        if has_lung and has_bone:
            return spec
    raise RuntimeError(f"could not draw a usable phantom for seed {seed} at grid {grid.shape}")


def generate_phantom(seed: int, grid: VolumeGrid) -> Volume:
    """Deterministic random phantom in HU on the given grid."""
    spec = draw_phantom_spec(seed, grid)
    return Volume(rasterize_spec(spec, grid), grid.voxel_mm, unit="hu")


def rasterize_sphere(grid: VolumeGrid, radius_mm: float, value: float,
                     center_mm: Sequence[float] = (0.0, 0.0, 0.0),
                     outside: float = 0.0, supersample: int = 1) -> np.ndarray:
    """Sphere on the grid with optional sub-voxel area averaging."""
    if radius_mm <= 0:
        raise ValueError("radius_mm must be positive")
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    x, y, z = grid.axis_coords()
    cx, cy, cz = center_mm
    h = grid.voxel_mm
    offs = ((np.arange(supersample) + 0.5) / supersample - 0.5) * h
    frac = np.zeros(grid.shape, dtype=np.float64)
    r2 = radius_mm * radius_mm
    for oz in offs:
        for oy in offs:
            for ox in offs:
                d2 = ((x[None, None, :] + ox - cx) ** 2
                      + (y[None, :, None] + oy - cy) ** 2
                      + (z[:, None, None] + oz - cz) ** 2)
                frac += d2 <= r2
    frac /= supersample ** 3
    return outside + (value - outside) * frac


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    flip: bool = True
    rotate: bool = True
    scale: bool = True
    rotate_max_deg: float = 15.0
    scale_range: tuple[float, float] = (0.9, 1.1)

    @property
    def enabled(self) -> bool:
        return self.flip or self.rotate or self.scale


def sample_trilinear(values: np.ndarray, gx: np.ndarray, gy: np.ndarray, gz: np.ndarray,
                     fill: float) -> np.ndarray:
    """Trilinear lookup at fractional indices, ``fill`` outside the grid."""
    nz, ny, nx = values.shape
    ix = np.floor(gx).astype(np.int64)
    iy = np.floor(gy).astype(np.int64)
    iz = np.floor(gz).astype(np.int64)
    fx, fy, fz = gx - ix, gy - iy, gz - iz
    out = np.zeros(gx.shape, dtype=np.float64)
    for dz in (0, 1):
        wz = fz if dz else 1.0 - fz
        jz = iz + dz
        okz = (jz >= 0) & (jz < nz)
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            jy = iy + dy
            oky = okz & (jy >= 0) & (jy < ny)
            for dx in (0, 1):
                wx = fx if dx else 1.0 - fx
                jx = ix + dx
                ok = oky & (jx >= 0) & (jx < nx)
                vals = np.where(ok, values[np.clip(jz, 0, nz - 1), np.clip(jy, 0, ny - 1), np.clip(jx, 0, nx - 1)], fill)
                out += wz * wy * wx * vals
    return out


def affine_resample(values: np.ndarray, voxel_mm: float,
                    flips: tuple[bool, bool, bool] = (False, False, False),
                    angle_deg: float = 0.0, scale: float = 1.0,
                    fill: float = AIR_HU) -> np.ndarray:
    """Resample under flip (about center), z-rotation, and isotropic scale.

    The three transforms compose (flip, then rotate, then scale) and the
    volume is resampled once; voxels mapping outside the source get
    ``fill``.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    nz, ny, nx = values.shape
    h = voxel_mm
    x = (np.arange(nx) - (nx - 1) / 2.0) * h
    y = (np.arange(ny) - (ny - 1) / 2.0) * h
    z = (np.arange(nz) - (nz - 1) / 2.0) * h
    px = np.broadcast_to(x[None, None, :], (nz, ny, nx)) / scale
    py = np.broadcast_to(y[None, :, None], (nz, ny, nx)) / scale
    pz = np.broadcast_to(z[:, None, None], (nz, ny, nx)) / scale
    t = math.radians(angle_deg)
    ct, st = math.cos(t), math.sin(t)
    qx = ct * px + st * py
    qy = -st * px + ct * py
    qz = pz
    sx = -1.0 if flips[0] else 1.0
    sy = -1.0 if flips[1] else 1.0
    sz = -1.0 if flips[2] else 1.0
    gx = (sx * qx) / h + (nx - 1) / 2.0
    gy = (sy * qy) / h + (ny - 1) / 2.0
    gz = (sz * qz) / h + (nz - 1) / 2.0
    return sample_trilinear(values, gx, gy, gz, fill)


def augment(volume: Volume, seed: int, config: AugmentConfig = AugmentConfig()) -> Volume:
    """Seeded random flip/rotate/scale of an HU volume.

    Flip-only draws use exact axis reversal (no resampling error).
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), 0xA46)))
    flips = tuple(bool(b) for b in (rng.random(3) < 0.5)) if config.flip else (False, False, False)
    angle = float(rng.uniform(-config.rotate_max_deg, config.rotate_max_deg)) if config.rotate else 0.0
    lo, hi = config.scale_range
    scale = float(rng.uniform(lo, hi)) if config.scale else 1.0

    vals = volume.values
    if angle == 0.0 and scale == 1.0:
        out = vals[:: -1 if flips[2] else 1, :: -1 if flips[1] else 1, :: -1 if flips[0] else 1].copy()
    else:
        out = affine_resample(vals.astype(np.float64), volume.voxel_mm, flips, angle, scale)
    return volume.with_values(out)


# ---------------------------------------------------------------------------
# scan simulation


def simulate_scan(volume: Volume, geometry: ConeBeamGeometry,
                  sparse_factor: int = 1) -> tuple[ProjectionStack, Volume]:
    """Project an HU phantom to sparse-view line integrals.

    Only the retained views are computed; the result is identical to
    projecting all views and slicing out every ``sparse_factor``-th one.
    Returns the stack and the untouched ground-truth volume.
    """
    if volume.unit != "hu":
        raise ValueError(f"simulate_scan expects an HU volume, got unit {volume.unit!r}")
    nz, ny, nx = volume.shape
    grid = VolumeGrid(nx=nx, ny=ny, nz=nz, voxel_mm=volume.voxel_mm)
    sparse_geom = geometry.with_angles(sparse_subsample(geometry.angles_deg, sparse_factor))
    mu = hu_to_mu(volume.values)
    proj = forward_project(mu.astype(np.float64), grid, sparse_geom)
    return ProjectionStack(proj, sparse_geom), volume
