"""Test-set evaluation, delimited report, sidecar, and figures.

The report path writes three artifacts next to each other: the aligned
pipe-delimited table (``<report>``), a machine-readable sidecar with the
same numbers as ``key = value`` lines (``<report stem>.kv``), and two
figures (``<stem>_metrics.png``, ``<stem>_slices.png``).
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import TrainConfig
from .containers import ProjectionStack, Volume
from .fileio import load_projections, load_volume
from .metrics import (SliceMetrics, aggregate_finite, volume_slice_metrics,
                      wilcoxon_signed_rank)
from .models import ReconstructionModel, reconstruct_fdk
from .training import load_manifest, load_model_from_checkpoint


@dataclass
class MethodResult:
    method: str
    ssim_mean: float
    ssim_std: float
    psnr_mean: float
    psnr_std: float
    rmse_mean: float
    rmse_std: float
    n_slices: int
    per_slice: list[SliceMetrics] = field(default_factory=list)
    example_slices: list[np.ndarray] = field(default_factory=list)


@dataclass
class PairTest:
    method_a: str
    method_b: str
    metric: str
    n: int
    statistic: float
    p_value: float
    test_method: str


@dataclass
class EvalReport:
    methods: list[MethodResult]
    pairs: list[PairTest]
    report_path: str = ""
    sidecar_path: str = ""
    figure_paths: list[str] = field(default_factory=list)


def _method_label(model: Optional[ReconstructionModel]) -> str:
    return "fdk" if model is None else model.config.kind


def evaluate_methods(cfg: TrainConfig, data_dir, checkpoints: Sequence[str],
                     methods: Optional[Sequence[str]] = None) -> EvalReport:
    """Reconstruct every test sample with each method and score it.

    ``methods`` defaults to the analytic fdk baseline plus one entry per
    checkpoint. Learned methods are matched to checkpoints by model
    kind; asking for a method with no matching checkpoint is an error.
    """
    manifest = load_manifest(data_dir)
    test_ids = list(manifest["splits"]["test"])
    if not test_ids:
        raise ValueError("dataset has no test samples to evaluate")

    models: dict[str, ReconstructionModel] = {}
    for path in checkpoints:
        model, mcfg, _ = load_model_from_checkpoint(path)
        kind = mcfg.model
        if kind in models:
            raise ValueError(f"multiple checkpoints provide model kind {kind!r}")
        models[kind] = model

    if methods is None:
        method_list = ["fdk"] + sorted(models)
    else:
        method_list = list(methods)
        for m in method_list:
            if m != "fdk" and m not in models:
                raise ValueError(f"method {m!r} requested but no checkpoint of that kind was given")
    if not method_list:
        raise ValueError("no methods to evaluate")

    grid = cfg.grid()
    results: list[MethodResult] = []
    per_method_psnr: dict[str, list[float]] = {}
    for name in method_list:
        model = models.get(name)
        slices: list[SliceMetrics] = []
        examples: list[np.ndarray] = []
        for sid in test_ids:
            gt = load_volume(os.path.join(data_dir, manifest["volumes"][sid]))
            stack = load_projections(os.path.join(data_dir, manifest["projections"][sid]))
            recon = _reconstruct(name, model, stack, grid)
            slices.extend(volume_slice_metrics(recon.values, gt.values))
            examples.append(recon.values[recon.values.shape[0] // 2].copy())
        ssim_m, ssim_s, _ = aggregate_finite([s.ssim for s in slices], "ssim")
        psnr_m, psnr_s, n_used = aggregate_finite([s.psnr_db for s in slices], "psnr")
        rmse_m, rmse_s, _ = aggregate_finite([s.rmse_hu for s in slices], "rmse")
        results.append(MethodResult(name, ssim_m, ssim_s, psnr_m, psnr_s,
                                    rmse_m, rmse_s, len(slices), slices, examples))
        per_method_psnr[name] = [s.psnr_db for s in slices]

    pairs: list[PairTest] = []
    for i in range(len(method_list)):
        for j in range(i + 1, len(method_list)):
            a, b = method_list[i], method_list[j]
            pa = np.asarray(per_method_psnr[a])
            pb = np.asarray(per_method_psnr[b])
            ok = np.isfinite(pa) & np.isfinite(pb)
            if ok.sum() < pa.size:
                warnings.warn(f"{int(pa.size - ok.sum())} slice pair(s) with non-finite psnr "
                              f"excluded from {a} vs {b}")
            try:
                r = wilcoxon_signed_rank(pa[ok], pb[ok])
                pairs.append(PairTest(a, b, "psnr", r.n, r.statistic, r.p_value, r.method))
            except ValueError as e:
                warnings.warn(f"wilcoxon {a} vs {b} skipped: {e}")

    # ground-truth example slices for the montage
    gt_examples = []
    for sid in test_ids:
        gt = load_volume(os.path.join(data_dir, manifest["volumes"][sid]))
        gt_examples.append(gt.values[gt.values.shape[0] // 2].copy())
    report = EvalReport(results, pairs)
    report._gt_examples = gt_examples  # type: ignore[attr-defined]
    return report


def _reconstruct(name: str, model: Optional[ReconstructionModel],
                 stack: ProjectionStack, grid) -> Volume:
    if name == "fdk":
        return reconstruct_fdk(stack, grid)
    assert model is not None
    return model.reconstruct(stack)


# ---------------------------------------------------------------------------
# rendering


def format_report(report: EvalReport) -> str:
    """Aligned pipe-delimited table plus the pairwise significance block."""
    headers = ["method", "ssim_pct_mean", "ssim_pct_std", "psnr_db_mean",
               "psnr_db_std", "rmse_hu_mean", "rmse_hu_std", "n_slices"]
    rows = [headers]
    for m in report.methods:
        rows.append([m.method,
                     f"{100.0 * m.ssim_mean:.2f}", f"{100.0 * m.ssim_std:.2f}",
                     f"{m.psnr_mean:.2f}", f"{m.psnr_std:.2f}",
                     f"{m.rmse_mean:.2f}", f"{m.rmse_std:.2f}", str(m.n_slices)])
    lines = _align(rows)
    if report.pairs:
        lines.append("")
        prows = [["pair", "metric", "n", "statistic", "p_value", "test"]]
        for p in report.pairs:
            prows.append([f"{p.method_a}_vs_{p.method_b}", p.metric, str(p.n),
                          f"{p.statistic:.1f}", f"{p.p_value:.3e}", p.test_method])
        lines.extend(_align(prows))
    return "\n".join(lines) + "\n"


def _align(rows: list[list[str]]) -> list[str]:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return [" | ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]


def format_sidecar(report: EvalReport) -> str:
    lines = []
    for m in report.methods:
        for key, val in (("ssim_pct_mean", 100.0 * m.ssim_mean), ("ssim_pct_std", 100.0 * m.ssim_std),
                         ("psnr_db_mean", m.psnr_mean), ("psnr_db_std", m.psnr_std),
                         ("rmse_hu_mean", m.rmse_mean), ("rmse_hu_std", m.rmse_std),
                         ("n_slices", m.n_slices)):
            # plain float repr: numpy scalar reprs do not parse back
            lines.append(f"{m.method}.{key} = {float(val)!r}")
    for p in report.pairs:
        base = f"wilcoxon.{p.method_a}_vs_{p.method_b}.{p.metric}"
        lines.append(f"{base}.n = {int(p.n)}")
        lines.append(f"{base}.statistic = {float(p.statistic)!r}")
        lines.append(f"{base}.p_value = {float(p.p_value)!r}")
        lines.append(f"{base}.test = {p.test_method}")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, report_path) -> EvalReport:
    """Write table, key=value sidecar, and figures next to ``report_path``."""
    report_path = str(report_path)
    with open(report_path, "w", encoding="utf-8") as f:
        f.write(format_report(report))
    stem, _ = os.path.splitext(report_path)
    sidecar = stem + ".kv"
    with open(sidecar, "w", encoding="utf-8") as f:
        f.write(format_sidecar(report))
    report.report_path = report_path
    report.sidecar_path = sidecar
    report.figure_paths = _render_figures(report, stem)
    return report


def _render_figures(report: EvalReport, stem: str) -> list[str]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    names = [m.method for m in report.methods]

    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    specs = [("SSIM [%]", [100 * m.ssim_mean for m in report.methods], [100 * m.ssim_std for m in report.methods]),
             ("PSNR [dB]", [m.psnr_mean for m in report.methods], [m.psnr_std for m in report.methods]),
             ("RMSE [HU]", [m.rmse_mean for m in report.methods], [m.rmse_std for m in report.methods])]
    for ax, (title, means, stds) in zip(axes, specs):
        ax.bar(names, means, yerr=stds, capsize=3, color="#4878a8")
        ax.set_title(title)
        ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    metrics_path = stem + "_metrics.png"
    fig.savefig(metrics_path, dpi=120)
    plt.close(fig)
    paths.append(metrics_path)

    gt_examples = getattr(report, "_gt_examples", [])
    n_cols = min(3, min((len(m.example_slices) for m in report.methods), default=0))
    if n_cols > 0:
        n_rows = len(report.methods) + (1 if gt_examples else 0)
        fig, axes = plt.subplots(n_rows, n_cols, figsize=(2.6 * n_cols, 2.6 * n_rows), squeeze=False)
        row_sources = [(m.method, m.example_slices) for m in report.methods]
        if gt_examples:
            row_sources.append(("reference", gt_examples))
        for r, (label, slices) in enumerate(row_sources):
            for c in range(n_cols):
                ax = axes[r][c]
                ax.imshow(slices[c], cmap="gray", vmin=-1000, vmax=2000)
                ax.set_xticks([])
                ax.set_yticks([])
                if c == 0:
                    ax.set_ylabel(label, fontsize=9)
        fig.tight_layout()
        slices_path = stem + "_slices.png"
        fig.savefig(slices_path, dpi=120)
        plt.close(fig)
        paths.append(slices_path)
    return paths
