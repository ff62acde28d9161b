"""Reconstruction networks built on the differentiable operator layers.

Three learned reconstructors share the same input/output contract:
normalized projections in, a normalized volume out.

* ``fdkconvnet``: FDK reconstruction plus a residual 3D UNet.
* ``pdnet``: unrolled primal-dual iterations with small convolutional
  blocks, fresh parameters per iteration.
* ``pdunet``: the same unrolling, but the primal update is a single 3D
  UNet shared across all iterations.

The dual state lives on the full projection stack (channels, views,
rows, cols) and dual blocks convolve across neighboring views; the
primal state lives on the reconstruction grid. Measured data enters
every dual update, and the operator layers (projection, FDK) couple the
two domains inside the unrolled graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterator, Optional

import numpy as np

from .autodiff import Tensor, no_grad
from .containers import (HU_WINDOW_DEFAULT, MU_WATER_PER_MM, ProjectionStack,
                         Volume, denormalize_hu, mu_to_hu, norm_to_mu_coeffs)
from .fdk import RampFilter, fdk_layer, fdk_reconstruct
from .geometry import ConeBeamGeometry, VolumeGrid
from .layers import (avgpool3d, batchnorm3d, concat_channels, conv3d, prelu,
                     slice_channels, upsample_trilinear)
from .projector import forward_project, project_layer

MODEL_KINDS = ("fdkconvnet", "pdnet", "pdunet")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters (desk-scale defaults)."""

    kind: str = "pdunet"
    n_iterations: int = 2
    primal_channels: int = 5
    dual_channels: int = 5
    hidden_channels: int = 16
    unet_depth: int = 2
    unet_base_channels: int = 8

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        for name in ("n_iterations", "primal_channels", "dual_channels",
                     "hidden_channels", "unet_depth", "unet_base_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


# ---------------------------------------------------------------------------
# module system


class Module:
    """Composable parameter container with dotted-name traversal."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for n, p in self._params.items():
            yield prefix + n, p
        for n, m in self._modules.items():
            yield from m.named_parameters(prefix + n + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for n, b in self._buffers.items():
            yield prefix + n, b
        for n, m in self._modules.items():
            yield from m.named_buffers(prefix + n + ".")

    def parameters(self) -> Iterator[Tensor]:
        for _, p in self.named_parameters():
            yield p

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters and buffers as a flat name -> array mapping."""
        out = {name: p.data for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            out[name] = b
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Assign parameters/buffers by name; names and shapes must match."""
        own = {name: p for name, p in self.named_parameters()}
        bufs = dict(self.named_buffers())
        expected = set(own) | set(bufs)
        got = set(arrays)
        if expected != got:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise ValueError(f"state mismatch: missing {missing[:6]}, unexpected {extra[:6]}")
        for name, arr in arrays.items():
            target = own[name].data if name in own else bufs[name]
            if target.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {target.shape}")
            target[...] = arr.astype(target.dtype)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        name = str(len(self._items))
        self._items.append(module)
        self._modules[name] = module
        object.__setattr__(self, name, module)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]

    def __len__(self) -> int:
        return len(self._items)


# ---------------------------------------------------------------------------
# elementary modules


class Conv3d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        super().__init__()
        fan_in = in_channels * kernel ** 3
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel, kernel, kernel))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias)


class BatchNorm3d(Module):
    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm3d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           self.training, self.momentum, self.eps)


class PReLU(Module):
    def __init__(self, channels: int, dtype=np.float32, init: float = 0.25):
        super().__init__()
        self.slope = Tensor(np.full(channels, init, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return prelu(x, self.slope)


class ConvBlock(Module):
    """conv3 -> PReLU -> conv3 -> PReLU -> conv3, no normalization.

    The final conv starts at zero so the residual update the block feeds
    is initially inactive and the unrolled model starts at the FDK
    chain's output instead of a random perturbation of it. Large random
    residuals at initialization poison Adam's second-moment estimates
    and cost most of a short training budget to unwind.
    """

    def __init__(self, in_channels: int, hidden: int, out_channels: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv3d(in_channels, hidden, 3, rng, dtype)
        self.act1 = PReLU(hidden, dtype)
        self.conv2 = Conv3d(hidden, hidden, 3, rng, dtype)
        self.act2 = PReLU(hidden, dtype)
        self.conv3 = Conv3d(hidden, out_channels, 3, rng, dtype)
        self.conv3.weight.data[...] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        x = self.act1(self.conv1(x))
        x = self.act2(self.conv2(x))
        return self.conv3(x)


class DoubleConv(Module):
    """(conv3 -> batchnorm -> PReLU) twice."""

    def __init__(self, in_channels: int, out_channels: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv3d(in_channels, out_channels, 3, rng, dtype)
        self.bn1 = BatchNorm3d(out_channels, dtype)
        self.act1 = PReLU(out_channels, dtype)
        self.conv2 = Conv3d(out_channels, out_channels, 3, rng, dtype)
        self.bn2 = BatchNorm3d(out_channels, dtype)
        self.act2 = PReLU(out_channels, dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = self.act1(self.bn1(self.conv1(x)))
        return self.act2(self.bn2(self.conv2(x)))


class UNet3d(Module):
    """Symmetric encoder/decoder with skip concatenation.

    Downsampling by 2x2x2 average pooling, upsampling by trilinear
    interpolation; ``depth`` pooling stages, channel width doubling per
    stage from ``base``; 1x1x1 output convolution.
    """

    def __init__(self, in_channels: int, out_channels: int, depth: int, base: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.depth = depth
        encoders = []
        for i in range(depth):
            cin = in_channels if i == 0 else base * 2 ** (i - 1)
            encoders.append(DoubleConv(cin, base * 2 ** i, rng, dtype))
        self.encoders = ModuleList(encoders)
        self.bottleneck = DoubleConv(base * 2 ** (depth - 1), base * 2 ** depth, rng, dtype)
        decoders = []
        for i in reversed(range(depth)):
            decoders.append(DoubleConv(base * 2 ** (i + 1) + base * 2 ** i, base * 2 ** i, rng, dtype))
        self.decoders = ModuleList(decoders)
        # zero start, same rationale as ConvBlock.conv3
        self.head = Conv3d(base, out_channels, 1, rng, dtype)
        self.head.weight.data[...] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        div = 2 ** self.depth
        d, h, w = x.shape[-3:]
        if d % div or h % div or w % div:
            raise ValueError(f"unet input dims {(d, h, w)} must be divisible by {div} (depth {self.depth})")
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = avgpool3d(x)
        x = self.bottleneck(x)
        for i, dec in enumerate(self.decoders):
            x = upsample_trilinear(x)
            x = concat_channels([x, skips[self.depth - 1 - i]])
            x = dec(x)
        return self.head(x)


# ---------------------------------------------------------------------------
# operator-coupled reconstructors


def calibrate_ones_projection(geom: ConeBeamGeometry, grid: VolumeGrid) -> np.ndarray:
    """Line integrals of an all-ones volume (used for scale calibration)."""
    return forward_project(np.ones(grid.shape, dtype=np.float64), grid, geom)


def projection_scale(geom: ConeBeamGeometry, grid: VolumeGrid,
                     ones_proj: Optional[np.ndarray] = None) -> float:
    """Max line integral of a water-attenuation calibration volume."""
    if ones_proj is None:
        ones_proj = calibrate_ones_projection(geom, grid)
    scale = MU_WATER_PER_MM * float(ones_proj.max())
    if scale <= 0:
        raise ValueError("projection scale is zero: no ray intersects the volume")
    return scale


class ReconstructionModel(Module):
    """Common plumbing: domain scaling, FDK initialization, HU output."""

    def __init__(self, geom: ConeBeamGeometry, grid: VolumeGrid, config: ModelConfig,
                 dtype=np.float32, window: tuple[float, float] = HU_WINDOW_DEFAULT,
                 proj_scale: Optional[float] = None):
        super().__init__()
        if min(grid.nx, grid.ny, grid.nz) < 3:
            raise ValueError(f"grid {grid.shape} too small for 3x3x3 convolution support")
        self.geom = geom
        self.grid = grid
        self.config = config
        self.dtype = np.dtype(dtype)
        self.window = (float(window[0]), float(window[1]))
        self.filt = RampFilter.for_cols(geom.det_cols)
        slope, offset = norm_to_mu_coeffs(self.window)
        self.mu_slope = slope
        self.mu_offset = offset
        if proj_scale is None or offset != 0.0:
            ones_proj = calibrate_ones_projection(geom, grid)
            self._ones_proj = ones_proj.astype(self.dtype)
            if proj_scale is None:
                proj_scale = projection_scale(geom, grid, ones_proj)
        else:
            self._ones_proj = None
        # round-trips through f32 checkpoint meta without drift
        self.proj_scale = float(np.float32(proj_scale))
        if self.proj_scale <= 0:
            raise ValueError("proj_scale must be positive")

    # domain bridges ------------------------------------------------------

    def _project_norm(self, f: Tensor) -> Tensor:
        """Normalized volume channel -> normalized projection channel."""
        p = project_layer(f, self.geom, self.grid) * (self.mu_slope / self.proj_scale)
        if self.mu_offset != 0.0:
            p = p + Tensor((self.mu_offset / self.proj_scale) * self._ones_proj)
        return p

    def _fdk_norm(self, h: Tensor) -> Tensor:
        """Normalized projection channel -> normalized volume channel."""
        v = fdk_layer(h, self.geom, self.grid, self.filt) * (self.proj_scale / self.mu_slope)
        if self.mu_offset != 0.0:
            v = v + Tensor(np.full(self.grid.shape, -self.mu_offset / self.mu_slope, dtype=self.dtype))
        return v

    def _lift_input(self, g) -> tuple[Tensor, bool]:
        t = g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=self.dtype))
        expected = (self.geom.n_views, self.geom.det_rows, self.geom.det_cols)
        if t.ndim == 3:
            if t.shape != expected:
                raise ValueError(f"projection shape {t.shape} does not match geometry {expected}")
            return t.reshape((1, 1) + expected), False
        if t.ndim == 4:
            if t.shape[1:] != expected:
                raise ValueError(f"projection shape {t.shape[1:]} does not match geometry {expected}")
            return t.reshape((t.shape[0], 1) + expected), True
        raise ValueError(f"expected (views,rows,cols) or (N,views,rows,cols), got rank {t.ndim}")

    def _finish(self, f: Tensor, batched: bool) -> Tensor:
        n = f.shape[0]
        out = f.reshape((n,) + self.grid.shape)
        return out if batched else out.reshape(self.grid.shape)

    # user-facing ---------------------------------------------------------

    def reconstruct(self, stack: ProjectionStack) -> Volume:
        """Reconstruct a measured stack (line integrals) to an HU volume."""
        got = stack.geometry
        if (got.n_views, got.det_rows, got.det_cols) != (self.geom.n_views, self.geom.det_rows, self.geom.det_cols) \
                or abs(got.fingerprint() - self.geom.fingerprint()) > 1e-3:
            raise ValueError("projection geometry does not match the geometry this model was built for")
        g_norm = (stack.values / self.proj_scale).astype(self.dtype)
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                out = self.forward(Tensor(g_norm))
        finally:
            self.train(was_training)
        hu = denormalize_hu(out.data, self.window)
        return Volume(hu, self.grid.voxel_mm, unit="hu")


class FDKConvNet(ReconstructionModel):
    """FDK reconstruction refined by a residual UNet."""

    def __init__(self, geom, grid, config: ModelConfig, rng: np.random.Generator,
                 dtype=np.float32, window=HU_WINDOW_DEFAULT, proj_scale=None):
        super().__init__(geom, grid, config, dtype, window, proj_scale)
        _check_unet_grid(grid, config.unet_depth)
        self.unet = UNet3d(1, 1, config.unet_depth, config.unet_base_channels, rng, dtype)

    def forward(self, g) -> Tensor:
        g5, batched = self._lift_input(g)
        x0 = self._fdk_norm(g5)
        out = x0 + self.unet(x0)
        return self._finish(out, batched)


class PrimalDualNet(ReconstructionModel):
    """Unrolled primal-dual reconstruction.

    Dual state: (dual_channels, views, rows, cols); primal state:
    (primal_channels, nz, ny, nx). Channel 0 of each state is the
    exchange channel passed through the operator layers. The primal
    state starts from the FDK reconstruction of the measurements, the
    dual state from zeros. ``kind == "pdunet"`` shares one UNet across
    all primal updates; ``kind == "pdnet"`` uses per-iteration conv
    blocks.
    """

    def __init__(self, geom, grid, config: ModelConfig, rng: np.random.Generator,
                 dtype=np.float32, window=HU_WINDOW_DEFAULT, proj_scale=None):
        super().__init__(geom, grid, config, dtype, window, proj_scale)
        if min(geom.det_rows, geom.det_cols) < 3:
            raise ValueError(f"detector {geom.det_rows}x{geom.det_cols} too small for 3x3x3 convolution support")
        cfg = config
        self.dual_blocks = ModuleList(
            ConvBlock(cfg.dual_channels + 2, cfg.hidden_channels, cfg.dual_channels, rng, self.dtype)
            for _ in range(cfg.n_iterations)
        )
        if cfg.kind == "pdunet":
            _check_unet_grid(grid, cfg.unet_depth)
            self.primal_unet = UNet3d(cfg.primal_channels + 1, cfg.primal_channels,
                                      cfg.unet_depth, cfg.unet_base_channels, rng, self.dtype)
            self.primal_blocks = None
        elif cfg.kind == "pdnet":
            self.primal_unet = None
            self.primal_blocks = ModuleList(
                ConvBlock(cfg.primal_channels + 1, cfg.hidden_channels, cfg.primal_channels, rng, self.dtype)
                for _ in range(cfg.n_iterations)
            )
        else:
            raise ValueError(f"PrimalDualNet cannot be built for kind {cfg.kind!r}")

    def forward(self, g) -> Tensor:
        g5, batched = self._lift_input(g)
        n = g5.shape[0]
        cfg = self.config
        x0 = self._fdk_norm(g5)
        f = concat_channels([x0] * cfg.primal_channels) if cfg.primal_channels > 1 else x0
        h = Tensor(np.zeros((n, cfg.dual_channels) + g5.shape[2:], dtype=self.dtype))
        for i in range(cfg.n_iterations):
            f0 = slice_channels(f, 0, 1)
            pf = self._project_norm(f0)
            h = h + self.dual_blocks[i](concat_channels([h, pf, g5]))
            h0 = slice_channels(h, 0, 1)
            bp = self._fdk_norm(h0)
            pin = concat_channels([f, bp])
            update = self.primal_unet(pin) if cfg.kind == "pdunet" else self.primal_blocks[i](pin)
            f = f + update
        out = slice_channels(f, 0, 1)
        return self._finish(out, batched)


def _check_unet_grid(grid: VolumeGrid, depth: int) -> None:
    div = 2 ** depth
    if grid.nx % div or grid.ny % div or grid.nz % div:
        raise ValueError(f"grid {grid.shape} not divisible by 2^{depth} required by unet_depth={depth}")


def build_model(kind: str, geom: ConeBeamGeometry, grid: VolumeGrid, config: ModelConfig,
                seed: int = 0, dtype=np.float32, window=HU_WINDOW_DEFAULT,
                proj_scale: Optional[float] = None) -> ReconstructionModel:
    """Construct a model with deterministic seed-derived initialization."""
    cfg = replace(config, kind=kind)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), 0x6D6F64)))
    if kind == "fdkconvnet":
        return FDKConvNet(geom, grid, cfg, rng, dtype, window, proj_scale)
    if kind in ("pdnet", "pdunet"):
        return PrimalDualNet(geom, grid, cfg, rng, dtype, window, proj_scale)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def reconstruct_fdk(stack: ProjectionStack, grid: VolumeGrid) -> Volume:
    """Plain FDK baseline returning an HU volume."""
    mu = fdk_reconstruct(stack.values.astype(np.float64), stack.geometry, grid)
    return Volume(mu_to_hu(mu), grid.voxel_mm, unit="hu")
