"""Evaluation reports: metrics tables, sidecar, figures, pairwise tests."""

import dataclasses

import numpy as np
import pytest

from cbctnet.config import TrainConfig
from cbctnet.evaluate import evaluate_methods, format_report, format_sidecar, write_report
from cbctnet.training import build_dataset, train_model

CFG = dict(
    n_phantoms=6, epochs=1, effective_batch=2, micro_batch=1,
    checkpoint_every=10, n_views_full=12, sparse_factor=4,
    grid_nx=12, grid_ny=12, grid_nz=12, voxel_mm=4.0,
    det_rows=12, det_cols=14, det_pixel_mm=4.928,
    model="pdnet", n_iterations=1, primal_channels=2, dual_channels=2,
    hidden_channels=4, unet_depth=1, unet_base_channels=4,
    augment=False,
)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval")
    cfg = dataclasses.replace(TrainConfig(), **CFG).validate()
    data = root / "data"
    build_dataset(cfg, data)
    out = root / "run"
    train_model(cfg, data, out)
    return cfg, data, out / "ckpt_last.cbk"


def test_report_structure(trained):
    cfg, data, ckpt = trained
    report = evaluate_methods(cfg, data, [str(ckpt)])
    names = [m.method for m in report.methods]
    assert names == ["fdk", "pdnet"]
    for m in report.methods:
        assert m.n_slices == 12  # 1 test volume x 12 axial slices
        assert np.isfinite(m.psnr_mean)
        assert 0.0 <= m.ssim_mean <= 1.0
        assert len(m.example_slices) == 1
    assert len(report.pairs) == 1
    p = report.pairs[0]
    assert {p.method_a, p.method_b} == {"fdk", "pdnet"}
    assert 0.0 <= p.p_value <= 1.0


def test_methods_selection_and_errors(trained):
    cfg, data, ckpt = trained
    only = evaluate_methods(cfg, data, [str(ckpt)], methods=["pdnet"])
    assert [m.method for m in only.methods] == ["pdnet"]
    assert only.pairs == []
    with pytest.raises(ValueError, match="no checkpoint"):
        evaluate_methods(cfg, data, [], methods=["pdunet"])
    with pytest.raises(ValueError, match="multiple checkpoints"):
        evaluate_methods(cfg, data, [str(ckpt), str(ckpt)])


def test_format_report_is_a_table(trained):
    cfg, data, ckpt = trained
    report = evaluate_methods(cfg, data, [str(ckpt)])
    text = format_report(report)
    lines = text.splitlines()
    assert any("method" in ln and "psnr_db_mean" in ln for ln in lines)
    assert any(ln.strip().startswith("fdk") for ln in lines)
    # pairwise significance block
    assert any("fdk_vs_pdnet" in ln for ln in lines)
    assert any("p_value" in ln for ln in lines)
    # delimited: every table row uses the pipe separator
    assert all(" | " in ln for ln in lines if ln.strip())


def test_sidecar_keys(trained):
    cfg, data, ckpt = trained
    report = evaluate_methods(cfg, data, [str(ckpt)])
    kv = dict(
        line.split(" = ", 1) for line in format_sidecar(report).splitlines() if " = " in line
    )
    for key in ("fdk.psnr_db_mean", "fdk.ssim_pct_mean", "fdk.rmse_hu_mean",
                "pdnet.psnr_db_mean", "pdnet.n_slices"):
        assert key in kv, f"missing {key}"
        float(kv[key])  # must parse
    assert "wilcoxon.fdk_vs_pdnet.psnr.p_value" in kv
    assert float(kv["wilcoxon.fdk_vs_pdnet.psnr.p_value"]) <= 1.0


def test_write_report_renders_figures(trained, tmp_path):
    cfg, data, ckpt = trained
    report = evaluate_methods(cfg, data, [str(ckpt)])
    out = tmp_path / "report.txt"
    report = write_report(report, out)
    assert out.exists()
    assert report.sidecar_path.endswith(".kv")
    assert (tmp_path / "report.kv").exists()
    assert len(report.figure_paths) == 2
    for fig in report.figure_paths:
        assert fig.endswith(".png")
        raw = open(fig, "rb").read(8)
        assert raw[:8] == b"\x89PNG\r\n\x1a\n"


def test_eval_requires_test_split(trained, tmp_path):
    cfg, data, ckpt = trained
    import json
    man_path = None
    for cand in data.iterdir():
        if cand.name == "manifest.json":
            man_path = cand
    man = json.loads(man_path.read_text())
    man["splits"]["test"] = []
    broken = tmp_path / "broken"
    broken.mkdir()
    import shutil
    for f in data.iterdir():
        shutil.copy(f, broken / f.name)
    (broken / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(ValueError, match="test"):
        evaluate_methods(cfg, broken, [str(ckpt)])
