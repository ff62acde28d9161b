"""Plain-text run configuration: ``key = value`` lines.

Blank lines and ``#`` comments are ignored. Every key must be known and
well-typed; parse errors carry the offending line number. Defaults
describe a desk-scale run (32^3 grid at 4 mm, 78x60 detector, 90 full
views subsampled 8x); ``configs/full.cfg`` in the repository shows the
full-scale protocol.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import ConeBeamGeometry, VolumeGrid, equiangular_angles, sparse_subsample
from .models import MODEL_KINDS, ModelConfig
from .phantoms import AugmentConfig


@dataclass
class TrainConfig:
    # reproducibility
    seed: int = 0
    precision: str = "f32"

    # optimization
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 151
    effective_batch: int = 16
    micro_batch: int = 1
    checkpoint_every: int = 25

    # data
    n_phantoms: int = 12
    n_views_full: int = 90
    sparse_factor: int = 8
    grid_nx: int = 32
    grid_ny: int = 32
    grid_nz: int = 32
    voxel_mm: float = 4.0
    det_rows: int = 60
    det_cols: int = 78
    det_pixel_mm: float = 4.928
    sid_mm: float = 160.0
    sdd_mm: float = 400.0
    hu_window_min: float = -1000.0
    hu_window_max: float = 2000.0

    # model
    model: str = "pdunet"
    n_iterations: int = 2
    primal_channels: int = 5
    dual_channels: int = 5
    hidden_channels: int = 16
    unet_depth: int = 2
    unet_base_channels: int = 8

    # augmentation
    augment: bool = True
    augment_flip: bool = True
    augment_rotate: bool = True
    augment_scale: bool = True
    rotate_max_deg: float = 15.0
    scale_min: float = 0.9
    scale_max: float = 1.1

    # ------------------------------------------------------------------

    def validate(self) -> "TrainConfig":
        c = self
        checks = [
            (c.precision in ("f32", "f64"), "precision must be f32 or f64"),
            (c.lr > 0, "lr must be positive"),
            (0.0 <= c.beta1 < 1.0, "beta1 must be in [0, 1)"),
            (0.0 <= c.beta2 < 1.0, "beta2 must be in [0, 1)"),
            (c.epochs >= 1, "epochs must be >= 1"),
            (c.effective_batch >= 1, "effective_batch must be >= 1"),
            (c.micro_batch >= 1, "micro_batch must be >= 1"),
            (c.micro_batch < 1 or c.effective_batch % c.micro_batch == 0,
             "effective_batch must be divisible by micro_batch"),
            (c.checkpoint_every >= 1, "checkpoint_every must be >= 1"),
            (c.n_phantoms >= 1, "n_phantoms must be >= 1"),
            (c.n_views_full >= 1, "n_views_full must be >= 1"),
            (1 <= c.sparse_factor <= c.n_views_full, "sparse_factor must be in [1, n_views_full]"),
            (min(c.grid_nx, c.grid_ny, c.grid_nz) >= 1, "grid dims must be positive"),
            (c.voxel_mm > 0, "voxel_mm must be positive"),
            (c.det_rows >= 1 and c.det_cols >= 1, "detector dims must be positive"),
            (c.det_pixel_mm > 0, "det_pixel_mm must be positive"),
            (0 < c.sid_mm < c.sdd_mm, "need 0 < sid_mm < sdd_mm"),
            (c.hu_window_max > c.hu_window_min, "hu_window_max must exceed hu_window_min"),
            (c.model in MODEL_KINDS, f"model must be one of {MODEL_KINDS}"),
            (c.n_iterations >= 1, "n_iterations must be >= 1"),
            (c.primal_channels >= 1, "primal_channels must be >= 1"),
            (c.dual_channels >= 1, "dual_channels must be >= 1"),
            (c.hidden_channels >= 1, "hidden_channels must be >= 1"),
            (c.unet_depth >= 1, "unet_depth must be >= 1"),
            (c.unet_base_channels >= 1, "unet_base_channels must be >= 1"),
            (c.rotate_max_deg >= 0, "rotate_max_deg must be >= 0"),
            (0 < c.scale_min <= c.scale_max, "need 0 < scale_min <= scale_max"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(f"invalid config: {msg}")
        return self

    # derived objects ----------------------------------------------------

    def full_geometry(self) -> ConeBeamGeometry:
        return ConeBeamGeometry(
            sid_mm=self.sid_mm, sdd_mm=self.sdd_mm,
            det_rows=self.det_rows, det_cols=self.det_cols,
            det_pixel_mm=self.det_pixel_mm,
            angles_deg=equiangular_angles(self.n_views_full),
        )

    def sparse_geometry(self) -> ConeBeamGeometry:
        g = self.full_geometry()
        return g.with_angles(sparse_subsample(g.angles_deg, self.sparse_factor))

    def grid(self) -> VolumeGrid:
        return VolumeGrid(nx=self.grid_nx, ny=self.grid_ny, nz=self.grid_nz, voxel_mm=self.voxel_mm)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            kind=self.model, n_iterations=self.n_iterations,
            primal_channels=self.primal_channels, dual_channels=self.dual_channels,
            hidden_channels=self.hidden_channels, unet_depth=self.unet_depth,
            unet_base_channels=self.unet_base_channels,
        )

    def augment_config(self) -> Optional[AugmentConfig]:
        if not self.augment:
            return None
        cfg = AugmentConfig(
            flip=self.augment_flip, rotate=self.augment_rotate, scale=self.augment_scale,
            rotate_max_deg=self.rotate_max_deg, scale_range=(self.scale_min, self.scale_max),
        )
        return cfg if cfg.enabled else None

    def window(self) -> tuple[float, float]:
        return (self.hu_window_min, self.hu_window_max)

    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _convert(key: str, raw: str, line_no: int):
    kind = _FIELDS[key]
    raw = raw.strip()
    try:
        if kind == "int" or kind is int:
            return int(raw)
        if kind == "float" or kind is float:
            return float(raw)
        if kind == "bool" or kind is bool:
            if raw == "true":
                return True
            if raw == "false":
                return False
            raise ValueError
        return raw
    except ValueError:
        raise ValueError(f"config line {line_no}: cannot parse {raw!r} as {kind} for key {key!r}") from None


def parse_config_text(text: str) -> TrainConfig:
    values: dict[str, object] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {line_no}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ValueError(f"config line {line_no}: unknown key {key!r}")
        if key in values:
            raise ValueError(f"config line {line_no}: duplicate key {key!r}")
        values[key] = _convert(key, raw, line_no)
    return TrainConfig(**values).validate()


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read())


def serialize_config(cfg: TrainConfig) -> str:
    """Canonical text form; parsing it reproduces ``cfg`` exactly."""
    lines = []
    for f in dataclasses.fields(TrainConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, float):
            s = repr(v)
        else:
            s = str(v)
        lines.append(f"{f.name} = {s}")
    return "\n".join(lines) + "\n"
