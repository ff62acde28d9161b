"""Desk-scale sparse-view cone-beam CT reconstruction.

A differentiable cone-beam projector and FDK layer pair, a compact
reverse-mode autodiff engine, unrolled primal-dual reconstruction
networks, synthetic phantom simulation, and the metrics/report tooling
to compare methods end to end.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, no_grad
from .config import TrainConfig, load_config, parse_config_text, serialize_config
from .containers import (MU_WATER_PER_MM, ProjectionStack, Volume,
                         denormalize_hu, hu_to_mu, mu_to_hu, normalize_hu)
from .fdk import RampFilter, fdk_adjoint_test, fdk_reconstruct, fdk_transpose
from .fileio import (FileFormatError, export_slice_pgm, load_checkpoint,
                     load_projections, load_volume, save_checkpoint,
                     save_projections, save_volume)
from .geometry import (ConeBeamGeometry, VolumeGrid, equiangular_angles,
                       sparse_subsample)
from .metrics import psnr, rmse, ssim2d, wilcoxon_signed_rank
from .models import ModelConfig, build_model, reconstruct_fdk
from .optim import AdamState, adam_step
from .phantoms import (AugmentConfig, augment, generate_phantom,
                       rasterize_sphere, simulate_scan)
from .projector import adjoint_test, forward_project, transpose_project
from .training import build_dataset, load_model_from_checkpoint, train_model

__all__ = [
    "Tensor", "no_grad", "TrainConfig", "load_config", "parse_config_text",
    "serialize_config", "MU_WATER_PER_MM", "ProjectionStack", "Volume",
    "denormalize_hu", "hu_to_mu", "mu_to_hu", "normalize_hu", "RampFilter",
    "fdk_adjoint_test", "fdk_reconstruct", "fdk_transpose", "FileFormatError",
    "export_slice_pgm", "load_checkpoint", "load_projections", "load_volume",
    "save_checkpoint", "save_projections", "save_volume", "ConeBeamGeometry",
    "VolumeGrid", "equiangular_angles", "sparse_subsample", "psnr", "rmse",
    "ssim2d", "wilcoxon_signed_rank", "ModelConfig", "build_model",
    "reconstruct_fdk", "AdamState", "adam_step", "AugmentConfig", "augment",
    "generate_phantom", "rasterize_sphere", "simulate_scan", "adjoint_test",
    "forward_project", "transpose_project", "build_dataset",
    "load_model_from_checkpoint", "train_model",
]
