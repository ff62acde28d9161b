"""Value containers and intensity-domain conversions.

Unit conventions: CT numbers in Hounsfield units (HU), attenuation in
1/mm, and a dimensionless normalized domain mapping the display window
(default [-1000, 2000] HU) onto [0, 1]. Water attenuation is fixed at
0.02/mm, so ``mu = 0.02 * (1 + HU/1000)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import ConeBeamGeometry

MU_WATER_PER_MM = 0.02

UNIT_HU = "hu"
UNIT_MU = "mu"
UNIT_NORM = "normalized"

_UNIT_CODES = {UNIT_HU: 0, UNIT_MU: 1, UNIT_NORM: 2}
_CODE_UNITS = {v: k for k, v in _UNIT_CODES.items()}

HU_WINDOW_DEFAULT = (-1000.0, 2000.0)


def unit_code(unit: str) -> int:
    try:
        return _UNIT_CODES[unit]
    except KeyError:
        raise ValueError(f"unknown volume unit {unit!r}; expected one of {sorted(_UNIT_CODES)}") from None


def unit_from_code(code: int) -> str:
    try:
        return _CODE_UNITS[code]
    except KeyError:
        raise ValueError(f"unknown volume unit code {code}") from None


@dataclass
class Volume:
    """A voxel volume: ``values`` indexed (z, y, x), isotropic spacing."""

    values: np.ndarray
    voxel_mm: float
    unit: str = UNIT_HU

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ValueError(f"Volume expects a 3D array, got rank {self.values.ndim}")
        if self.voxel_mm <= 0:
            raise ValueError("voxel_mm must be positive")
        unit_code(self.unit)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def with_values(self, values: np.ndarray, unit: str | None = None) -> "Volume":
        return replace(self, values=values, unit=self.unit if unit is None else unit)


@dataclass
class ProjectionStack:
    """Line-integral views: ``values`` indexed (view, row, col)."""

    values: np.ndarray
    geometry: ConeBeamGeometry

    def __post_init__(self):
        self.values = np.asarray(self.values)
        expected = (self.geometry.n_views, self.geometry.det_rows, self.geometry.det_cols)
        if self.values.shape != expected:
            raise ValueError(f"projection array shape {self.values.shape} does not match geometry {expected}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


# ---------------------------------------------------------------------------
# intensity conversions


def hu_to_mu(hu, mu_water: float = MU_WATER_PER_MM):
    """HU -> attenuation (1/mm), clamped at zero from below."""
    mu = mu_water * (1.0 + np.asarray(hu, dtype=np.float64) / 1000.0)
    return np.maximum(mu, 0.0)


def mu_to_hu(mu, mu_water: float = MU_WATER_PER_MM):
    """Attenuation (1/mm) -> HU (inverse of the affine part of hu_to_mu)."""
    return 1000.0 * (np.asarray(mu, dtype=np.float64) / mu_water - 1.0)


def normalize_hu(hu, window: tuple[float, float] = HU_WINDOW_DEFAULT):
    """Map the HU window onto [0, 1] with clamping."""
    lo, hi = window
    if hi <= lo:
        raise ValueError(f"invalid HU window {window}")
    n = (np.asarray(hu, dtype=np.float64) - lo) / (hi - lo)
    return np.clip(n, 0.0, 1.0)


def denormalize_hu(n, window: tuple[float, float] = HU_WINDOW_DEFAULT):
    """Inverse affine map of :func:`normalize_hu` (no clamping)."""
    lo, hi = window
    if hi <= lo:
        raise ValueError(f"invalid HU window {window}")
    return lo + np.asarray(n, dtype=np.float64) * (hi - lo)


def norm_to_mu_coeffs(window: tuple[float, float] = HU_WINDOW_DEFAULT,
                      mu_water: float = MU_WATER_PER_MM) -> tuple[float, float]:
    """Slope/offset of the unclamped normalized -> mu affine map.

    ``mu = slope * n + offset``. With the default window the offset is
    exactly zero, which keeps projection layers purely linear.
    """
    lo, hi = window
    if hi <= lo:
        raise ValueError(f"invalid HU window {window}")
    slope = mu_water * (hi - lo) / 1000.0
    offset = mu_water * (1.0 + lo / 1000.0)
    return slope, offset
