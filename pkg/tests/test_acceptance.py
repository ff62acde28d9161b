"""End-to-end acceptance criteria.

Each test computes a pass/fail verdict plus a one-line summary that the
``criterion`` fixture prints in its own terminal section, then asserts.
The heavy criteria (3, 5, 6) train or reconstruct at desk scale and take
minutes; everything here runs on a single CPU.
"""

import dataclasses
import json
import time

import numpy as np
import pytest

from cbctnet.autodiff import Tensor
from cbctnet.cli import _run_adjoint_test, adjoint_test_geometry
from cbctnet.config import TrainConfig, parse_config_text, serialize_config
from cbctnet.containers import normalize_hu
from cbctnet.fdk import fdk_adjoint_test, fdk_layer, fdk_reconstruct
from cbctnet.geometry import (ConeBeamGeometry, VolumeGrid, equiangular_angles,
                              sparse_subsample)
from cbctnet.layers import (avgpool3d, batchnorm3d, concat_channels, conv3d,
                            l1_loss, prelu, slice_channels, upsample_trilinear)
from cbctnet.metrics import psnr, rmse, ssim2d, wilcoxon_signed_rank
from cbctnet.models import build_model
from cbctnet.optim import AdamState, adam_step
from cbctnet.phantoms import generate_phantom, rasterize_sphere, simulate_scan
from cbctnet.projector import adjoint_test, forward_project, project_layer
from cbctnet.training import build_dataset, train_model
from cbctnet.evaluate import evaluate_methods

MU_WATER = 0.02


def fd_check(loss_fn, tensors, eps=1e-6, rtol=1e-3, atol=1e-8, max_components=None,
             rng=None):
    """Central finite differences vs backward() on selected components.

    The absolute floor covers parameters whose true gradient is zero
    (finite differences then only measure roundoff noise). When
    ``max_components`` is set, a random subset of each tensor is checked,
    which keeps the end-to-end network test affordable.
    """
    for t in tensors:
        t.grad = None  # tensors are reused across checks
    loss = loss_fn()
    loss.backward()
    grads = [t.grad.copy() for t in tensors]
    worst = 0.0
    for t, g in zip(tensors, grads):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_components is not None and flat.size > max_components:
            idx = rng.choice(flat.size, size=max_components, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            ad = g.reshape(-1)[i]
            err = abs(fd - ad) / max(max(abs(fd), abs(ad)), atol / rtol)
            worst = max(worst, err)
            assert abs(fd - ad) <= max(rtol * max(abs(fd), abs(ad)), atol), (
                f"grad mismatch at {i}: fd={fd:.3e} ad={ad:.3e}")
    return worst


# ---------------------------------------------------------------------------
# 1. adjoint correctness


def test_criterion_1_adjoint_correctness(criterion, capsys):
    t0 = time.time()
    geom, grid = adjoint_test_geometry("default")
    assert grid.shape == (16, 16, 16)
    assert (geom.det_rows, geom.det_cols, geom.n_views) == (10, 12, 8)

    proj64 = adjoint_test(geom, grid, seed=0, dtype=np.float64)
    fdk64 = fdk_adjoint_test(geom, grid, seed=0, dtype=np.float64)
    proj32 = adjoint_test(geom, grid, seed=0, dtype=np.float32)
    fdk32 = fdk_adjoint_test(geom, grid, seed=0, dtype=np.float32)
    cli_rc = _run_adjoint_test("default", 0, True)
    capsys.readouterr()
    elapsed = time.time() - t0

    ok = (proj64 <= 1e-10 and fdk64 <= 1e-10
          and proj32 <= 1e-4 and fdk32 <= 1e-4
          and cli_rc == 0 and elapsed < 10.0)
    criterion(1, ok, f"projector f64 {proj64:.2e}, fdk f64 {fdk64:.2e}, "
                     f"f32 {max(proj32, fdk32):.2e}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. projection accuracy against analytic oracles


def _chord_lengths(geom, center, radius):
    """Analytic ray-sphere chord length for every detector pixel of view 0."""
    src, det_c, eu, ev = geom.view_pose(0)
    us, vs = geom.detector_offsets()
    chords = np.zeros((geom.det_rows, geom.det_cols))
    for r in range(geom.det_rows):
        for c in range(geom.det_cols):
            pix = det_c + us[c] * eu + vs[r] * ev
            d = pix - src
            d = d / np.linalg.norm(d)
            oc = src - center
            b = np.dot(d, oc)
            disc = b * b - (np.dot(oc, oc) - radius * radius)
            chords[r, c] = 2.0 * np.sqrt(disc) if disc > 0 else 0.0
    return chords


def test_criterion_2_projection_accuracy(criterion):
    t0 = time.time()
    # central ray through a uniform cube: odd detector puts a pixel on the axis
    cube_grid = VolumeGrid(16, 16, 16, 2.0)
    cube = np.full(cube_grid.shape, MU_WATER)
    cube_geom = ConeBeamGeometry(200.0, 400.0, 5, 5, 1.0, np.array([0.0]))
    proj = forward_project(cube, cube_grid, cube_geom)
    central = proj[0, 2, 2]
    cube_expect = MU_WATER * 16 * 2.0
    cube_err = abs(central - cube_expect) / cube_expect

    # uniform sphere vs analytic chord lengths on in-shadow pixels
    sph_grid = VolumeGrid(64, 64, 64, 1.5)
    radius = 30.0
    sphere = rasterize_sphere(sph_grid, radius, MU_WATER, supersample=4)
    sph_geom = ConeBeamGeometry(300.0, 600.0, 45, 45, 3.0, np.array([0.0]))
    got = forward_project(sphere, sph_grid, sph_geom)[0]
    want = MU_WATER * _chord_lengths(sph_geom, np.zeros(3), radius)
    shadow = want > 0
    sph_err = rmse(got[shadow], want[shadow]) / np.sqrt(np.mean(want[shadow] ** 2))
    elapsed = time.time() - t0

    ok = cube_err <= 0.01 and sph_err <= 0.02 and elapsed < 30.0
    criterion(2, ok, f"cube central ray {cube_err * 100:.2f}%, "
                     f"sphere shadow RMS {sph_err * 100:.2f}%, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3. FDK fidelity and sparse-view degradation


def test_criterion_3_fdk_fidelity(criterion):
    t0 = time.time()
    grid = VolumeGrid(64, 64, 64, 2.0)
    radius = 40.0
    sphere = rasterize_sphere(grid, radius, MU_WATER, supersample=2)

    x, y, z = grid.axis_coords()
    r = np.sqrt(x[None, None, :] ** 2 + y[None, :, None] ** 2 + z[:, None, None] ** 2)
    core = r <= 0.75 * radius

    mean_err = {}
    rms_err = {}
    for n_views in (180, 23):
        if n_views == 180:
            angles = equiangular_angles(180)
        else:
            angles = sparse_subsample(equiangular_angles(360), 16)
            assert len(angles) == 23
        geom = ConeBeamGeometry(320.0, 800.0, 96, 96, 5.0, angles)
        proj = forward_project(sphere, grid, geom)
        rec = fdk_reconstruct(proj, geom, grid)
        mean_err[n_views] = abs(rec[core].mean() - MU_WATER) / MU_WATER
        # streak artifacts cancel in a region mean; compare per-voxel error
        rms_err[n_views] = float(np.sqrt(np.mean((rec[core] - MU_WATER) ** 2)))
    elapsed = time.time() - t0

    ok = mean_err[180] <= 0.10 and rms_err[23] > rms_err[180] and elapsed < 120.0
    criterion(3, ok, f"180-view core mean err {mean_err[180] * 100:.2f}%, core rmse "
                     f"180v {rms_err[180] / MU_WATER * 100:.2f}% < 23v "
                     f"{rms_err[23] / MU_WATER * 100:.2f}%, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 4. differentiability of every layer and the unrolled network


def test_criterion_4_gradients(criterion):
    t0 = time.time()
    rng = np.random.default_rng(3)
    worst = 0.0

    x = Tensor(rng.standard_normal((1, 2, 4, 4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 2, 3, 3, 3)) * 0.2, requires_grad=True)
    b = Tensor(rng.standard_normal(2) * 0.2, requires_grad=True)
    worst = max(worst, fd_check(lambda: conv3d(x, w, b).mean(), [x, w, b]))

    def sq_mean(t):
        return (t * t).mean()

    gamma = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
    beta = Tensor(rng.standard_normal(2), requires_grad=True)
    # random projection: a plain mean of bn(x)^2 is constant in x
    rproj = Tensor(rng.standard_normal((1, 2, 4, 4, 4)))

    def bn_loss():
        rm, rv = Tensor(np.zeros(2)), Tensor(np.ones(2))
        bn = batchnorm3d(x, gamma, beta, rm, rv, training=True)
        return sq_mean(bn * rproj)

    worst = max(worst, fd_check(bn_loss, [x, gamma, beta]))

    slope = Tensor(np.array([0.1, 0.3]), requires_grad=True)
    worst = max(worst, fd_check(lambda: sq_mean(prelu(x, slope)), [x, slope]))
    worst = max(worst, fd_check(lambda: sq_mean(avgpool3d(x)), [x]))
    worst = max(worst, fd_check(lambda: sq_mean(upsample_trilinear(x)), [x]))

    y = Tensor(rng.standard_normal((1, 1, 4, 4, 4)), requires_grad=True)
    worst = max(worst, fd_check(
        lambda: sq_mean(concat_channels([x, y])), [x, y]))
    worst = max(worst, fd_check(
        lambda: sq_mean(slice_channels(x, 1, 2)), [x]))
    worst = max(worst, fd_check(
        lambda: l1_loss(x, Tensor(np.zeros(x.shape))), [x], eps=1e-5))

    geom = ConeBeamGeometry(60.0, 120.0, 5, 6, 2.5, equiangular_angles(3))
    grid = VolumeGrid(6, 6, 6, 2.0)
    v = Tensor(rng.standard_normal((1,) + grid.shape), requires_grad=True)
    worst = max(worst, fd_check(
        lambda: sq_mean(project_layer(v, geom, grid)), [v]))
    p = Tensor(rng.standard_normal((1, 3, 5, 6)), requires_grad=True)
    worst = max(worst, fd_check(
        lambda: sq_mean(fdk_layer(p, geom, grid)), [p]))

    # end-to-end micro network: spot-check a slice of every parameter
    mgeom = ConeBeamGeometry(120.0, 300.0, 6, 8, 4.0, equiangular_angles(4))
    mgrid = VolumeGrid(8, 8, 8, 4.0)
    mcfg = dataclasses.replace(TrainConfig(), n_iterations=1, primal_channels=2,
                               dual_channels=2, hidden_channels=4, unet_depth=1,
                               unet_base_channels=4).model_config()
    model = build_model("pdunet", mgeom, mgrid, mcfg, seed=0, dtype=np.float64)
    model.train(True)
    g = Tensor(rng.standard_normal((mgeom.n_views, 6, 8)) * 0.1)
    target = rng.standard_normal(mgrid.shape) * 0.1
    params = [p for _, p in sorted(model.named_parameters())]
    for p in params:
        # move off the zero-started output convs to a generic point,
        # otherwise most gradients vanish and the check proves nothing
        p.data += 0.1 * rng.standard_normal(p.data.shape)
    worst = max(worst, fd_check(lambda: l1_loss(model.forward(g), Tensor(target)),
                                params, eps=1e-5, max_components=3, rng=rng))
    elapsed = time.time() - t0

    ok = elapsed < 120.0  # the fd_check asserts already enforce 1e-3
    criterion(4, ok, f"all layers + micro pdunet, worst rel err {worst:.1e}, "
                     f"{elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 5. single-phantom overfit


def test_criterion_5_overfit(criterion):
    t0 = time.time()
    grid = VolumeGrid(24, 24, 24, 4.0)
    geom_full = ConeBeamGeometry(160.0, 400.0, 40, 44, 4.928, equiangular_angles(90))
    cfg = TrainConfig()
    vol = generate_phantom(11, grid)
    stack, _ = simulate_scan(vol, geom_full, sparse_factor=8)
    assert stack.geometry.n_views == 12

    model = build_model("pdunet", stack.geometry, grid, cfg.model_config(),
                        seed=0, dtype=np.float32)
    # the residual output convs ship zero-initialized, which makes the
    # starting loss the FDK baseline error; redraw them so the overfit
    # starts from a generic random point instead
    init_rng = np.random.default_rng(1)
    for name, p in model.named_parameters():
        if name.endswith("conv3.weight") or name.endswith("head.weight"):
            bound = 1.0 / np.sqrt(np.prod(p.data.shape[1:]))
            p.data[...] = init_rng.uniform(-bound, bound, p.data.shape)
    model.train(True)
    g = Tensor((stack.values / model.proj_scale).astype(np.float32))
    target = Tensor(normalize_hu(vol.values, cfg.window()).astype(np.float32))

    params = dict(model.named_parameters())
    state = AdamState(lr=1e-3, beta1=0.9, beta2=0.999)
    initial = None
    best = np.inf
    for step in range(300):
        model.zero_grad()
        loss = l1_loss(model.forward(g), target)
        val = loss.item()
        if initial is None:
            initial = val
        best = min(best, val)
        # don't stop at the 0.10 bar: that level is reachable by merely
        # damping the residual convs back to the FDK baseline
        if best <= 0.03 * initial:
            break
        loss.backward()
        adam_step(params, {n: p.grad for n, p in params.items()}, state)
    elapsed = time.time() - t0

    ratio = best / initial
    ok = ratio <= 0.10 and elapsed < 600.0
    criterion(5, ok, f"L1 {initial:.4f} -> {best:.4f} (ratio {ratio:.3f}) "
                     f"in {state.step} steps, {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 6. desk-scale ordering trend


def test_criterion_6_ordering_trend(criterion, tmp_path):
    t0 = time.time()
    # ten phantoms split 7/1/2: training consumes eight (fit + val) and
    # two stay held out; batch 1 maximizes update steps in 30 epochs
    cfg = dataclasses.replace(
        TrainConfig(), n_phantoms=10, epochs=30, effective_batch=1,
        checkpoint_every=1000, seed=0)
    data = tmp_path / "data"
    build_dataset(cfg, data)

    man = json.loads((data / "manifest.json").read_text())
    splits = man["splits"]
    assert len(splits["train"]) + len(splits["val"]) == 8
    assert len(splits["test"]) == 2

    ckpts = []
    for kind in ("pdunet", "pdnet"):
        run_cfg = dataclasses.replace(cfg, model=kind)
        res = train_model(run_cfg, data, tmp_path / kind, log=lambda s: None)
        ckpts.append(res.checkpoint_best or res.checkpoint_last)
    report = evaluate_methods(cfg, data, ckpts, methods=["fdk", "pdunet", "pdnet"])
    db = {m.method: m.psnr_mean for m in report.methods}
    elapsed = time.time() - t0

    ok = (db["pdunet"] > db["fdk"] + 3.0
          and db["pdunet"] >= db["pdnet"] - 0.5
          and elapsed < 7200.0)
    criterion(6, ok, f"fdk {db['fdk']:.2f} dB, pdnet {db['pdnet']:.2f} dB, "
                     f"pdunet {db['pdunet']:.2f} dB, {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 7. metrics oracles


def test_criterion_7_metrics(criterion, rng):
    t0 = time.time()
    a = rng.uniform(-1000, 2000, (16, 16))
    b = a + rng.standard_normal((16, 16)) * 40
    closed = 20 * np.log10(3000.0 / rmse(a, b))
    psnr_ok = abs(psnr(a, b) - closed) <= 1e-9 * abs(closed)
    ssim_ok = ssim2d(a, a) == 1.0
    rmse_ok = rmse(a, a + 100.0) == 100.0

    w5 = wilcoxon_signed_rank([1.0, 2.0, 3.0, 4.0, 5.0], [0.0, 0.0, 0.0, 0.0, 0.0])
    exact_ok = w5.method == "exact" and abs(w5.p_value - 0.0625) <= 1e-12

    d = rng.standard_normal(30) + 0.3
    exact = wilcoxon_signed_rank(d, np.zeros(30), method="exact")
    approx = wilcoxon_signed_rank(d, np.zeros(30), method="approx")
    agree_ok = abs(exact.p_value - approx.p_value) <= 0.01
    elapsed = time.time() - t0

    ok = psnr_ok and ssim_ok and rmse_ok and exact_ok and agree_ok and elapsed < 10.0
    criterion(7, ok, f"psnr/ssim/rmse exact, n=5 p={w5.p_value}, "
                     f"n=30 |exact-approx|={abs(exact.p_value - approx.p_value):.4f}, "
                     f"{elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 8. protocol fidelity


def test_criterion_8_protocol(criterion):
    cfg = TrainConfig()
    text = serialize_config(cfg)
    lines_ok = all(line in text for line in (
        "lr = 0.001", "beta1 = 0.9", "beta2 = 0.999",
        "epochs = 151", "effective_batch = 16"))
    parsed = parse_config_text(text)
    values_ok = (parsed.lr == 1e-3 and parsed.beta1 == 0.9 and parsed.beta2 == 0.999
                 and parsed.epochs == 151 and parsed.effective_batch == 16)
    sparse = sparse_subsample(equiangular_angles(360), 16)
    sparse_ok = len(sparse) == 23

    ok = lines_ok and values_ok and sparse_ok
    criterion(8, ok, f"defaults serialized, sparse_subsample(360, 16) -> {len(sparse)} views")
    assert ok


# ---------------------------------------------------------------------------
# 9. reproducibility


TINY9 = dict(
    n_phantoms=3, epochs=2, effective_batch=2, micro_batch=1,
    checkpoint_every=1, n_views_full=12, sparse_factor=4,
    grid_nx=12, grid_ny=12, grid_nz=12, voxel_mm=4.0,
    det_rows=10, det_cols=12, det_pixel_mm=4.928,
    model="pdnet", n_iterations=1, primal_channels=2, dual_channels=2,
    hidden_channels=4, unet_depth=1, unet_base_channels=4,
    augment=False,
)


def test_criterion_9_reproducibility(criterion, tmp_path):
    t0 = time.time()
    cfg = dataclasses.replace(TrainConfig(), **TINY9)
    data = tmp_path / "data"
    build_dataset(cfg, data)

    res_a = train_model(cfg, data, tmp_path / "a", log=lambda s: None)
    res_b = train_model(cfg, data, tmp_path / "b", log=lambda s: None)
    bits_a = (tmp_path / "a" / "ckpt_last.cbk").read_bytes()
    identical = bits_a == (tmp_path / "b" / "ckpt_last.cbk").read_bytes()

    # save -> load -> resume must continue on the original trajectory
    one = dataclasses.replace(cfg, epochs=1)
    train_model(one, data, tmp_path / "c", log=lambda s: None)
    res_c = train_model(cfg, data, tmp_path / "c",
                        resume=str(tmp_path / "c" / "ckpt_last.cbk"), log=lambda s: None)
    next_a = res_a.history[1].train_loss
    next_c = res_c.history[0].train_loss
    rel = abs(next_a - next_c) / abs(next_a)
    elapsed = time.time() - t0

    ok = identical and rel <= 1e-6
    criterion(9, ok, f"checkpoints bit-identical: {identical}, "
                     f"resume loss rel diff {rel:.2e}, {elapsed:.0f}s")
    assert ok
