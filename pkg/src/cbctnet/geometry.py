"""Circular cone-beam acquisition geometry and reconstruction grids.

Convention: the source orbits in the z = 0 plane. At view angle
``theta`` (degrees) the source sits at ``(SID*cos t, SID*sin t, 0)`` and
the flat detector center at ``-(SDD - SID)*(cos t, sin t, 0)``, i.e. on
the opposite side of the isocenter along the same ray. Detector axes:
``u = (-sin t, cos t, 0)`` (columns, in-plane) and ``v = (0, 0, 1)``
(rows, axial). The pixel at row ``r``, column ``c`` is centered at
``center + (c - (n_cols-1)/2) * pitch * u + (r - (n_rows-1)/2) * pitch * v``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ConeBeamGeometry:
    """Source/detector layout for a circular scan.

    Distances in millimeters; ``angles_deg`` holds one entry per view.
    """

    sid_mm: float
    sdd_mm: float
    det_rows: int
    det_cols: int
    det_pixel_mm: float
    angles_deg: tuple[float, ...]

    def __post_init__(self):
        if self.sid_mm <= 0 or self.sdd_mm <= 0:
            raise ValueError("sid_mm and sdd_mm must be positive")
        if self.sdd_mm <= self.sid_mm:
            raise ValueError(f"sdd_mm ({self.sdd_mm}) must exceed sid_mm ({self.sid_mm})")
        if self.det_rows < 1 or self.det_cols < 1:
            raise ValueError("detector must have at least one row and column")
        if self.det_pixel_mm <= 0:
            raise ValueError("det_pixel_mm must be positive")
        if len(self.angles_deg) < 1:
            raise ValueError("geometry needs at least one view angle")
        object.__setattr__(self, "angles_deg", tuple(float(a) for a in self.angles_deg))

    @property
    def n_views(self) -> int:
        return len(self.angles_deg)

    @property
    def magnification(self) -> float:
        return self.sdd_mm / self.sid_mm

    def view_pose(self, index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Source position, detector center, u axis, v axis for one view."""
        t = math.radians(self.angles_deg[index])
        ct, st = math.cos(t), math.sin(t)
        source = np.array([self.sid_mm * ct, self.sid_mm * st, 0.0])
        center = np.array([-(self.sdd_mm - self.sid_mm) * ct, -(self.sdd_mm - self.sid_mm) * st, 0.0])
        u_axis = np.array([-st, ct, 0.0])
        v_axis = np.array([0.0, 0.0, 1.0])
        return source, center, u_axis, v_axis

    def detector_offsets(self) -> tuple[np.ndarray, np.ndarray]:
        """Signed metric offsets of pixel centers: (u per column, v per row)."""
        u = (np.arange(self.det_cols) - (self.det_cols - 1) / 2.0) * self.det_pixel_mm
        v = (np.arange(self.det_rows) - (self.det_rows - 1) / 2.0) * self.det_pixel_mm
        return u, v

    def with_angles(self, angles_deg: Sequence[float]) -> "ConeBeamGeometry":
        return replace(self, angles_deg=tuple(float(a) for a in angles_deg))

    def fingerprint(self) -> float:
        """Scalar summary used to detect checkpoint/geometry mismatches."""
        acc = (
            self.sid_mm * 1.000003
            + self.sdd_mm * 1.000007
            + self.det_rows * 1.000011
            + self.det_cols * 1.000013
            + self.det_pixel_mm * 1.000017
            + self.n_views * 1.000019
        )
        acc += sum(a * (1.0 + 1e-6 * (i % 97)) for i, a in enumerate(self.angles_deg)) / max(self.n_views, 1)
        return float(np.float32(acc))


@dataclass(frozen=True)
class VolumeGrid:
    """Axis-aligned voxel grid centered on the isocenter.

    Arrays indexed ``(z, y, x)`` with x fastest; voxel ``(ix, iy, iz)``
    is centered at ``((ix - (nx-1)/2) * h, ...)`` in millimeters.
    """

    nx: int
    ny: int
    nz: int
    voxel_mm: float

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1 or self.nz < 1:
            raise ValueError("grid dimensions must be positive")
        if self.voxel_mm <= 0:
            raise ValueError("voxel_mm must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nz, self.ny, self.nx)

    @property
    def n_voxels(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def extent_mm(self) -> tuple[float, float, float]:
        return (self.nx * self.voxel_mm, self.ny * self.voxel_mm, self.nz * self.voxel_mm)

    def axis_coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Voxel-center coordinates along x, y, z in millimeters."""
        h = self.voxel_mm
        x = (np.arange(self.nx) - (self.nx - 1) / 2.0) * h
        y = (np.arange(self.ny) - (self.ny - 1) / 2.0) * h
        z = (np.arange(self.nz) - (self.nz - 1) / 2.0) * h
        return x, y, z

    def support_halfwidths(self) -> tuple[float, float, float]:
        """Half-width per axis of the trilinear support box.

        The interpolated field is exactly zero at and beyond
        ``(n + 1)/2 * voxel_mm`` from center along each axis.
        """
        h = self.voxel_mm
        return ((self.nx + 1) / 2.0 * h, (self.ny + 1) / 2.0 * h, (self.nz + 1) / 2.0 * h)

    def fingerprint(self) -> float:
        acc = self.nx * 1.000023 + self.ny * 1.000029 + self.nz * 1.000031 + self.voxel_mm * 1.000037
        return float(np.float32(acc))


def equiangular_angles(n_views: int) -> tuple[float, ...]:
    """``n`` angles uniformly covering [0, 360) degrees starting at 0."""
    if n_views < 1:
        raise ValueError("n_views must be positive")
    return tuple(360.0 * i / n_views for i in range(n_views))


def sparse_subsample(angles_deg: Sequence[float], factor: int) -> tuple[float, ...]:
    """Every ``factor``-th angle starting from index 0."""
    if factor < 1:
        raise ValueError("sparse factor must be >= 1")
    angles = tuple(float(a) for a in angles_deg)
    if not angles:
        raise ValueError("angle list is empty")
    return angles[::factor]
