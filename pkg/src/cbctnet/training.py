"""Dataset generation and the training loop.

A dataset directory holds one volume/projection file pair per phantom
plus ``manifest.json`` describing the split and echoing the generating
config. Training consumes groups of ``effective_batch`` samples split
into ``micro_batch``-sized forward/backward passes whose gradients
accumulate before a single Adam step, so memory stays bounded while the
update equals a full-batch step. All shuffling and augmentation draws
derive from (seed, epoch, sample) alone, which makes interrupted and
resumed runs reproduce the original trajectory exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .config import TrainConfig, parse_config_text, serialize_config
from .containers import Volume, normalize_hu
from .fileio import (CheckpointData, load_checkpoint, load_projections,
                     load_volume, save_checkpoint, save_projections, save_volume)
from .layers import l1_loss
from .models import ReconstructionModel, build_model
from .optim import AdamState, adam_step
from .phantoms import augment, generate_phantom, simulate_scan
from .training_utils import chunks  # noqa: F401  (re-exported for tests)

MANIFEST_NAME = "manifest.json"

# config fields that must match between a dataset and a training run
_DATA_FIELDS = (
    "seed", "n_phantoms", "n_views_full", "sparse_factor",
    "grid_nx", "grid_ny", "grid_nz", "voxel_mm",
    "det_rows", "det_cols", "det_pixel_mm", "sid_mm", "sdd_mm",
)


def split_counts(n: int) -> tuple[int, int, int]:
    """Train/val/test sizes in the 42/9/10 proportion (rounded)."""
    if n < 1:
        raise ValueError("need at least one sample")
    train = round(n * 42 / 61)
    val = round(n * 9 / 61)
    test = n - train - val
    return train, val, test


def phantom_seed(base_seed: int, index: int) -> int:
    return int(base_seed) * 1_000_003 + int(index)


def sample_id(index: int) -> str:
    return f"{index:04d}"


def build_dataset(cfg: TrainConfig, out_dir, log: Optional[Callable[[str], None]] = None) -> dict:
    """Generate phantoms and sparse-view scans; write files and manifest."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    geom_full = cfg.full_geometry()
    grid = cfg.grid()
    n = cfg.n_phantoms
    tr, va, te = split_counts(n)
    ids = [sample_id(i) for i in range(n)]
    manifest = {
        "config": serialize_config(cfg),
        "n_phantoms": n,
        "splits": {"train": ids[:tr], "val": ids[tr:tr + va], "test": ids[tr + va:]},
        "volumes": {},
        "projections": {},
    }
    for i, sid in enumerate(ids):
        vol = generate_phantom(phantom_seed(cfg.seed, i), grid)
        stack, _ = simulate_scan(vol, geom_full, cfg.sparse_factor)
        vol_name = f"vol_{sid}.cbv"
        proj_name = f"proj_{sid}.cbp"
        save_volume(os.path.join(out_dir, vol_name), vol)
        save_projections(os.path.join(out_dir, proj_name), stack)
        manifest["volumes"][sid] = vol_name
        manifest["projections"][sid] = proj_name
        if log:
            log(f"simulated {sid} ({i + 1}/{n})")
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def load_manifest(data_dir) -> dict:
    path = os.path.join(data_dir, MANIFEST_NAME)
    if not os.path.exists(path):
        raise OSError(f"no {MANIFEST_NAME} in {data_dir}; run simulate first")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def check_dataset_compatible(cfg: TrainConfig, manifest: dict) -> None:
    data_cfg = parse_config_text(manifest["config"])
    diffs = [f"{name}: dataset={getattr(data_cfg, name)!r} run={getattr(cfg, name)!r}"
             for name in _DATA_FIELDS if getattr(data_cfg, name) != getattr(cfg, name)]
    if diffs:
        raise ValueError("dataset is incompatible with this config: " + "; ".join(diffs))


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    epochs_run: int
    best_val: float
    best_epoch: int
    history: list[EpochStats] = field(default_factory=list)
    checkpoint_last: str = ""
    checkpoint_best: str = ""


class _SampleSource:
    """Loads training samples, with augmented re-simulation when enabled."""

    def __init__(self, cfg: TrainConfig, data_dir: str, manifest: dict,
                 model: ReconstructionModel):
        self.cfg = cfg
        self.data_dir = data_dir
        self.manifest = manifest
        self.model = model
        self.geom_full = cfg.full_geometry()
        self.aug_cfg = cfg.augment_config()
        self.window = cfg.window()
        self.dtype = cfg.dtype()

    def _paths(self, sid: str) -> tuple[str, str]:
        return (os.path.join(self.data_dir, self.manifest["volumes"][sid]),
                os.path.join(self.data_dir, self.manifest["projections"][sid]))

    def load(self, sid: str, epoch: int, augmented: bool) -> tuple[np.ndarray, np.ndarray]:
        """Returns (normalized projections, normalized target volume)."""
        vol_path, proj_path = self._paths(sid)
        vol = load_volume(vol_path)
        if augmented and self.aug_cfg is not None:
            aug_seed = int(np.random.SeedSequence(
                entropy=(self.cfg.seed, 0xA06, epoch, int(sid))).generate_state(1)[0])
            vol = augment(vol, aug_seed, self.aug_cfg)
            stack, _ = simulate_scan(vol, self.geom_full, self.cfg.sparse_factor)
            proj = stack.values
        else:
            proj = load_projections(proj_path).values
        g_norm = (proj.astype(np.float64) / self.model.proj_scale).astype(self.dtype)
        target = normalize_hu(vol.values, self.window).astype(self.dtype)
        return g_norm, target


def train_model(cfg: TrainConfig, data_dir, out_dir,
                resume: Optional[str] = None,
                log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Train the configured model; writes last/best/periodic checkpoints."""
    cfg.validate()
    manifest = load_manifest(data_dir)
    check_dataset_compatible(cfg, manifest)
    os.makedirs(out_dir, exist_ok=True)

    train_ids = list(manifest["splits"]["train"])
    val_ids = list(manifest["splits"]["val"])
    if not train_ids:
        raise ValueError("dataset has no training samples")

    model = build_model(cfg.model, cfg.sparse_geometry(), cfg.grid(), cfg.model_config(),
                        seed=cfg.seed, dtype=cfg.dtype(), window=cfg.window())
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    params = dict(model.named_parameters())

    start_epoch = 0
    best_val = np.inf
    best_epoch = -1
    history: list[EpochStats] = []
    if resume is not None:
        ckpt = load_checkpoint(resume)
        _restore_model(model, cfg, ckpt)
        if ckpt.optimizer is None:
            raise ValueError(f"checkpoint {resume} has no optimizer state; cannot resume")
        state.step = int(ckpt.optimizer["step"])
        for name in params:
            state.m[name] = ckpt.optimizer[f"m.{name}"].astype(params[name].data.dtype)
            state.v[name] = ckpt.optimizer[f"v.{name}"].astype(params[name].data.dtype)
        start_epoch = int(ckpt.meta["epoch"])
        best_val = float(ckpt.meta.get("best_val", np.inf))
        best_epoch = int(ckpt.meta.get("best_epoch", -1))
        if start_epoch >= cfg.epochs:
            raise ValueError(f"checkpoint already trained for {start_epoch} epochs (config asks for {cfg.epochs})")

    source = _SampleSource(cfg, data_dir, manifest, model)
    last_path = os.path.join(out_dir, "ckpt_last.cbk")
    best_path = os.path.join(out_dir, "ckpt_best.cbk")

    for epoch in range(start_epoch, cfg.epochs):
        model.train(True)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 0xE90C, epoch)))
        order = [train_ids[i] for i in rng.permutation(len(train_ids))]
        loss_sum = 0.0
        n_seen = 0
        for g_idx, group in enumerate(chunks(order, cfg.effective_batch)):
            model.zero_grad()
            for micro in chunks(group, cfg.micro_batch):
                gs, ts = zip(*(source.load(sid, epoch, augmented=True) for sid in micro))
                out = model.forward(Tensor(np.stack(gs)))
                loss = l1_loss(out, Tensor(np.stack(ts)))
                lval = loss.item()
                if not np.isfinite(lval):
                    raise RuntimeError(
                        f"aborting: non-finite training loss {lval} at epoch {epoch}, "
                        f"group {g_idx}, samples {list(micro)}")
                loss_sum += lval * len(micro)
                n_seen += len(micro)
                # scale so accumulated gradients average over the group
                (loss * (len(micro) / len(group))).backward()
            grads = {}
            for name, p in params.items():
                if p.grad is None or not np.isfinite(p.grad).all():
                    raise RuntimeError(f"aborting: missing or non-finite gradient for {name!r} "
                                       f"at epoch {epoch}, group {g_idx}")
                grads[name] = p.grad
            adam_step(params, grads, state)
        train_loss = loss_sum / max(n_seen, 1)

        val_loss = _validation_loss(model, source, val_ids, epoch) if val_ids else train_loss
        history.append(EpochStats(epoch, train_loss, val_loss))
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs}: train_loss={train_loss:.6f} val_loss={val_loss:.6f}")

        improved = val_loss < best_val
        if improved:
            best_val = val_loss
            best_epoch = epoch
        meta = {"epoch": epoch + 1, "best_val": best_val, "best_epoch": best_epoch,
                "proj_scale": model.proj_scale,
                "geometry_fingerprint": model.geom.fingerprint() + model.grid.fingerprint()}
        _save(last_path, cfg, model, state, meta)
        if improved:
            _save(best_path, cfg, model, state, meta)
        if (epoch + 1) % cfg.checkpoint_every == 0 and epoch + 1 < cfg.epochs:
            _save(os.path.join(out_dir, f"ckpt_epoch{epoch + 1:04d}.cbk"), cfg, model, state, meta)

    with open(os.path.join(out_dir, "history.json"), "w", encoding="utf-8") as f:
        json.dump([vars(h) for h in history], f, indent=1)
    return TrainResult(epochs_run=cfg.epochs - start_epoch, best_val=best_val,
                       best_epoch=best_epoch, history=history,
                       checkpoint_last=last_path,
                       checkpoint_best=best_path if os.path.exists(best_path) else "")


def _validation_loss(model: ReconstructionModel, source: _SampleSource,
                     val_ids: Sequence[str], epoch: int) -> float:
    model.train(False)
    total = 0.0
    with no_grad():
        for sid in val_ids:
            g, t = source.load(sid, epoch, augmented=False)
            out = model.forward(Tensor(g))
            total += float(np.abs(out.data - t).mean())
    model.train(True)
    return total / len(val_ids)


def _save(path, cfg: TrainConfig, model: ReconstructionModel, state: AdamState,
          meta: dict) -> None:
    opt = {"step": np.asarray(float(state.step), dtype=np.float32)}
    for name, m in state.m.items():
        opt[f"m.{name}"] = m
    for name, v in state.v.items():
        opt[f"v.{name}"] = v
    save_checkpoint(path, serialize_config(cfg), model.state_arrays(), meta, opt)


def _restore_model(model: ReconstructionModel, cfg: TrainConfig, ckpt: CheckpointData) -> None:
    fp = model.geom.fingerprint() + model.grid.fingerprint()
    stored = ckpt.meta.get("geometry_fingerprint")
    if stored is not None and abs(stored - fp) > 1e-3:
        raise ValueError("checkpoint geometry fingerprint does not match the configured geometry")
    model.load_state_arrays(ckpt.tensors)


def load_model_from_checkpoint(path) -> tuple[ReconstructionModel, TrainConfig, CheckpointData]:
    """Rebuild the exact model a checkpoint was saved from (eval mode)."""
    ckpt = load_checkpoint(path)
    cfg = parse_config_text(ckpt.config_text)
    proj_scale = ckpt.meta.get("proj_scale")
    model = build_model(cfg.model, cfg.sparse_geometry(), cfg.grid(), cfg.model_config(),
                        seed=cfg.seed, dtype=cfg.dtype(), window=cfg.window(),
                        proj_scale=proj_scale)
    _restore_model(model, cfg, ckpt)
    model.eval()
    return model, cfg, ckpt
