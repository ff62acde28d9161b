"""Binary file formats: volumes (CBV1), projections (CBP1), checkpoints
(CBK1), and PGM slice export.

All multi-byte fields are little-endian. Array payloads are float32 in
C order (x fastest for volumes, column fastest for projection views).
Structural problems raise :class:`FileFormatError` with a message
naming the defect (bad magic, invalid dimensions, truncated payload).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Mapping, Optional

import numpy as np

from .containers import ProjectionStack, Volume, unit_code, unit_from_code
from .geometry import ConeBeamGeometry

_MAX_ELEMENTS = 2 ** 31


class FileFormatError(Exception):
    """A file does not conform to one of the container formats."""


def _read(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FileFormatError(f"truncated file: expected {n} bytes for {what}, got {len(data)}")
    return data


def _read_u32(f: BinaryIO, what: str) -> int:
    return struct.unpack("<I", _read(f, 4, what))[0]


def _read_f32(f: BinaryIO, what: str) -> float:
    return struct.unpack("<f", _read(f, 4, what))[0]


def _read_array(f: BinaryIO, count: int, what: str) -> np.ndarray:
    raw = _read(f, 4 * count, what)
    return np.frombuffer(raw, dtype="<f4").copy()


def _check_magic(f: BinaryIO, magic: bytes) -> None:
    got = _read(f, 4, "magic")
    if got != magic:
        raise FileFormatError(f"bad magic: expected {magic!r}, got {got!r}")


def _check_version(f: BinaryIO, expected: int = 1) -> None:
    v = _read_u32(f, "version")
    if v != expected:
        raise FileFormatError(f"unsupported format version {v} (expected {expected})")


def _check_no_trailing(f: BinaryIO) -> None:
    extra = f.read(1)
    if extra:
        raise FileFormatError("trailing data after payload")


def _check_dims(dims: tuple[int, ...]) -> None:
    if any(d < 1 for d in dims):
        raise FileFormatError(f"invalid dimensions {dims}: all must be >= 1")
    total = 1
    for d in dims:
        total *= d
        if total > _MAX_ELEMENTS:
            raise FileFormatError(f"invalid dimensions {dims}: element count overflows")


# ---------------------------------------------------------------------------
# volumes


def save_volume(path, volume: Volume) -> None:
    nz, ny, nx = volume.shape
    with open(path, "wb") as f:
        f.write(b"CBV1")
        f.write(struct.pack("<IIIIfI", 1, nx, ny, nz, float(volume.voxel_mm), unit_code(volume.unit)))
        f.write(np.ascontiguousarray(volume.values, dtype="<f4").tobytes())


def load_volume(path) -> Volume:
    with open(path, "rb") as f:
        _check_magic(f, b"CBV1")
        _check_version(f)
        nx = _read_u32(f, "nx")
        ny = _read_u32(f, "ny")
        nz = _read_u32(f, "nz")
        _check_dims((nx, ny, nz))
        voxel = _read_f32(f, "voxel_mm")
        if not np.isfinite(voxel) or voxel <= 0:
            raise FileFormatError(f"invalid voxel size {voxel}")
        code = _read_u32(f, "unit code")
        try:
            unit = unit_from_code(code)
        except ValueError as e:
            raise FileFormatError(str(e)) from None
        data = _read_array(f, nx * ny * nz, "volume payload").reshape(nz, ny, nx)
        _check_no_trailing(f)
    return Volume(data, voxel, unit)


# ---------------------------------------------------------------------------
# projections


def save_projections(path, stack: ProjectionStack) -> None:
    g = stack.geometry
    with open(path, "wb") as f:
        f.write(b"CBP1")
        f.write(struct.pack("<IIIIfff", 1, g.n_views, g.det_rows, g.det_cols,
                            float(g.det_pixel_mm), float(g.sid_mm), float(g.sdd_mm)))
        f.write(np.asarray(g.angles_deg, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(stack.values, dtype="<f4").tobytes())


def load_projections(path) -> ProjectionStack:
    with open(path, "rb") as f:
        _check_magic(f, b"CBP1")
        _check_version(f)
        n_views = _read_u32(f, "n_views")
        rows = _read_u32(f, "det_rows")
        cols = _read_u32(f, "det_cols")
        _check_dims((n_views, rows, cols))
        pitch = _read_f32(f, "det_pixel_mm")
        sid = _read_f32(f, "sid_mm")
        sdd = _read_f32(f, "sdd_mm")
        angles = _read_array(f, n_views, "angles")
        data = _read_array(f, n_views * rows * cols, "projection payload").reshape(n_views, rows, cols)
        _check_no_trailing(f)
    try:
        geom = ConeBeamGeometry(sid_mm=float(sid), sdd_mm=float(sdd), det_rows=rows,
                                det_cols=cols, det_pixel_mm=float(pitch),
                                angles_deg=tuple(float(a) for a in angles))
    except ValueError as e:
        raise FileFormatError(f"invalid geometry in file: {e}") from None
    return ProjectionStack(data, geom)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class CheckpointData:
    """Decoded checkpoint: resolved config text, state, meta, optimizer."""

    config_text: str
    tensors: dict[str, np.ndarray]
    meta: dict[str, float]
    optimizer: Optional[dict[str, np.ndarray]]


def _write_tensor(f: BinaryIO, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
    a = np.asarray(arr, dtype="<f4")
    f.write(struct.pack("<I", a.ndim))
    for d in a.shape:
        f.write(struct.pack("<I", d))
    f.write(a.tobytes())


def _read_tensor(f: BinaryIO) -> tuple[str, np.ndarray]:
    name_len = _read_u32(f, "tensor name length")
    if name_len > 4096:
        raise FileFormatError(f"invalid tensor name length {name_len}")
    name = _read(f, name_len, "tensor name").decode("utf-8")
    rank = _read_u32(f, f"rank of {name!r}")
    if rank > 8:
        raise FileFormatError(f"invalid tensor rank {rank} for {name!r}")
    dims = tuple(_read_u32(f, f"dim of {name!r}") for _ in range(rank))
    if rank:
        _check_dims(dims)
    count = 1
    for d in dims:
        count *= d
    data = _read_array(f, count, f"data of {name!r}").reshape(dims)
    return name, data


def save_checkpoint(path, config_text: str, tensors: Mapping[str, np.ndarray],
                    meta: Mapping[str, float],
                    optimizer: Optional[Mapping[str, np.ndarray]] = None) -> None:
    """Write a CBK1 checkpoint.

    ``meta`` entries are stored as scalar tensors named ``meta.<key>`` in
    the main section; ``optimizer`` is an optional second tensor section.
    """
    for key in meta:
        if f"meta.{key}" in tensors:
            raise ValueError(f"meta key {key!r} collides with a tensor name")
    with open(path, "wb") as f:
        f.write(b"CBK1")
        f.write(struct.pack("<I", 1))
        cb = config_text.encode("utf-8")
        f.write(struct.pack("<I", len(cb)))
        f.write(cb)
        f.write(struct.pack("<I", len(tensors) + len(meta)))
        for name in sorted(tensors):
            _write_tensor(f, name, tensors[name])
        for key in sorted(meta):
            _write_tensor(f, f"meta.{key}", np.asarray(float(meta[key]), dtype=np.float32))
        if optimizer is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(struct.pack("<I", len(optimizer)))
            for name in sorted(optimizer):
                _write_tensor(f, name, optimizer[name])


def load_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as f:
        _check_magic(f, b"CBK1")
        _check_version(f)
        clen = _read_u32(f, "config length")
        if clen > 2 ** 20:
            raise FileFormatError(f"invalid config length {clen}")
        try:
            config_text = _read(f, clen, "config text").decode("utf-8")
        except UnicodeDecodeError:
            raise FileFormatError("config text is not valid UTF-8") from None
        n = _read_u32(f, "tensor count")
        if n > 2 ** 20:
            raise FileFormatError(f"invalid tensor count {n}")
        tensors: dict[str, np.ndarray] = {}
        meta: dict[str, float] = {}
        for _ in range(n):
            name, arr = _read_tensor(f)
            if name.startswith("meta."):
                if arr.ndim != 0:
                    raise FileFormatError(f"meta entry {name!r} must be scalar")
                meta[name[len("meta."):]] = float(arr)
            else:
                tensors[name] = arr
        flag = _read(f, 1, "optimizer flag")[0]
        if flag not in (0, 1):
            raise FileFormatError(f"invalid optimizer flag {flag}")
        optimizer = None
        if flag:
            n_opt = _read_u32(f, "optimizer tensor count")
            if n_opt > 2 ** 20:
                raise FileFormatError(f"invalid optimizer tensor count {n_opt}")
            optimizer = {}
            for _ in range(n_opt):
                name, arr = _read_tensor(f)
                optimizer[name] = arr
        _check_no_trailing(f)
    return CheckpointData(config_text, tensors, meta, optimizer)


# ---------------------------------------------------------------------------
# slice export


def export_slice_pgm(path, volume: Volume, axis: str = "z", index: int = 0,
                     window: tuple[float, float] = (-1000.0, 2000.0)) -> None:
    """Write one slice as binary PGM (P5), windowed to [0, 255].

    Values map affinely from ``window`` to 0..255 with clamping and
    round-half-up quantization.
    """
    if volume.unit != "hu":
        raise ValueError(f"slice export expects an HU volume, got unit {volume.unit!r}")
    axes = {"z": 0, "y": 1, "x": 2}
    if axis not in axes:
        raise ValueError(f"axis must be one of x, y, z; got {axis!r}")
    ax = axes[axis]
    n = volume.shape[ax]
    if not (0 <= index < n):
        raise ValueError(f"slice index {index} out of range [0, {n}) along {axis}")
    sl = np.take(volume.values, index, axis=ax)
    lo, hi = window
    if hi <= lo:
        raise ValueError(f"invalid window {window}")
    t = (np.clip(sl, lo, hi) - lo) / (hi - lo) * 255.0
    img = np.clip(np.floor(t + 0.5), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())
