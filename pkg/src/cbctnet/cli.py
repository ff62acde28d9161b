"""Command-line interface.

Subcommands: ``simulate`` (build a phantom dataset), ``train``,
``eval`` (test-set report with figures), ``reconstruct`` (single stack
to volume), ``export-slice`` (PGM preview), and ``adjoint-test``
(operator self-check). Exit codes: 0 success, 1 invalid arguments or
configuration, 2 file/format errors.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import TrainConfig, load_config
from .evaluate import evaluate_methods, format_report, write_report
from .fileio import FileFormatError, export_slice_pgm, load_projections, save_volume, load_volume
from .geometry import ConeBeamGeometry, VolumeGrid, equiangular_angles
from .models import reconstruct_fdk
from .projector import adjoint_test
from .fdk import fdk_adjoint_test
from .training import build_dataset, load_model_from_checkpoint, train_model


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage errors; remap to 1 (validation)
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="cbctnet", description="Sparse-view cone-beam CT reconstruction toolkit")
    p.add_argument("--version", action="version", version=f"cbctnet {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[], help="generate a phantom dataset")
    s.add_argument("--config", required=True, help="config file")
    s.add_argument("--n", type=int, default=None, help="override n_phantoms")
    s.add_argument("--seed", type=int, default=None, help="override seed")
    s.add_argument("--out", required=True, help="output dataset directory")

    t = sub.add_parser("train", help="train the configured model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="dataset directory from simulate")
    t.add_argument("--out", required=True, help="run directory for checkpoints")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")

    e = sub.add_parser("eval", help="evaluate methods on the test split")
    e.add_argument("--config", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", action="append", default=[],
                   help="model checkpoint (repeatable)")
    e.add_argument("--methods", default=None,
                   help="comma list, e.g. fdk,pdunet (default: fdk + all checkpoints)")
    e.add_argument("--report", required=True, help="report file; sidecar and figures go next to it")

    r = sub.add_parser("reconstruct", help="reconstruct one projection stack")
    r.add_argument("--method", required=True, choices=["fdk", "fdkconvnet", "pdnet", "pdunet"])
    r.add_argument("--checkpoint", default=None, help="checkpoint for learned methods")
    r.add_argument("--config", default=None, help="config providing the grid for --method fdk")
    r.add_argument("--projections", required=True)
    r.add_argument("--out", required=True, help="output volume file")

    x = sub.add_parser("export-slice", help="write one slice as a PGM image")
    x.add_argument("--volume", required=True)
    x.add_argument("--axis", default="z", choices=["x", "y", "z"])
    x.add_argument("--index", type=int, required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--window", default="-1000,2000", help="display window lo,hi in HU")

    a = sub.add_parser("adjoint-test", help="projector/FDK transpose self-check")
    a.add_argument("--preset", default="default", choices=["small", "default", "mismatch"])
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--f64", action="store_true",
                   help="run in 64-bit (tolerance 1e-10 instead of 1e-4)")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _dispatch(args)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileFormatError as e:
        print(f"file format error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "simulate":
        cfg = load_config(args.config)
        if args.n is not None or args.seed is not None:
            import dataclasses
            updates = {}
            if args.n is not None:
                updates["n_phantoms"] = args.n
            if args.seed is not None:
                updates["seed"] = args.seed
            cfg = dataclasses.replace(cfg, **updates).validate()
        build_dataset(cfg, args.out, log=print)
        print(f"dataset written to {args.out}")
        return 0

    if args.command == "train":
        cfg = load_config(args.config)
        result = train_model(cfg, args.data, args.out, resume=args.resume, log=print)
        print(f"best val loss {result.best_val:.6f} at epoch {result.best_epoch + 1}; "
              f"checkpoints in {args.out}")
        return 0

    if args.command == "eval":
        cfg = load_config(args.config)
        methods = args.methods.split(",") if args.methods else None
        report = evaluate_methods(cfg, args.data, args.checkpoint, methods)
        write_report(report, args.report)
        sys.stdout.write(format_report(report))
        print(f"report: {report.report_path}; sidecar: {report.sidecar_path}; "
              f"figures: {', '.join(report.figure_paths)}")
        return 0

    if args.command == "reconstruct":
        stack = load_projections(args.projections)
        if args.method == "fdk":
            if args.checkpoint is not None:
                raise ValueError("--method fdk does not take a checkpoint")
            cfg = load_config(args.config) if args.config else TrainConfig()
            vol = reconstruct_fdk(stack, cfg.grid())
        else:
            if args.checkpoint is None:
                raise ValueError(f"--method {args.method} requires --checkpoint")
            model, mcfg, _ = load_model_from_checkpoint(args.checkpoint)
            if mcfg.model != args.method:
                raise ValueError(f"checkpoint holds a {mcfg.model!r} model, not {args.method!r}")
            vol = model.reconstruct(stack)
        save_volume(args.out, vol)
        print(f"volume written to {args.out}")
        return 0

    if args.command == "export-slice":
        try:
            lo, hi = (float(v) for v in args.window.split(","))
        except ValueError:
            raise ValueError(f"cannot parse window {args.window!r}; expected lo,hi") from None
        vol = load_volume(args.volume)
        export_slice_pgm(args.out, vol, axis=args.axis, index=args.index, window=(lo, hi))
        print(f"slice written to {args.out}")
        return 0

    if args.command == "adjoint-test":
        return _run_adjoint_test(args.preset, args.seed, args.f64)

    raise ValueError(f"unknown command {args.command!r}")


def adjoint_test_geometry(preset: str) -> tuple[ConeBeamGeometry, VolumeGrid]:
    if preset == "small":
        return (ConeBeamGeometry(60.0, 120.0, 6, 8, 2.5, equiangular_angles(4)),
                VolumeGrid(8, 8, 8, 2.0))
    if preset in ("default", "mismatch"):
        return (ConeBeamGeometry(60.0, 150.0, 10, 12, 2.5, equiangular_angles(8)),
                VolumeGrid(16, 16, 16, 2.0))
    raise ValueError(f"unknown preset {preset!r}")


def _run_adjoint_test(preset: str, seed: int, use_f64: bool) -> int:
    dtype = np.float64 if use_f64 else np.float32
    tol = 1e-10 if use_f64 else 1e-4
    geom, grid = adjoint_test_geometry(preset)
    if preset == "mismatch":
        # deliberately inconsistent voxel size between forward and transpose
        from .projector import forward_project, transpose_project
        wrong = VolumeGrid(grid.nx, grid.ny, grid.nz, grid.voxel_mm * 1.3)
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(grid.shape).astype(dtype)
        y = rng.standard_normal((geom.n_views, geom.det_rows, geom.det_cols)).astype(dtype)
        lhs = float(np.vdot(forward_project(x, grid, geom).astype(np.float64), y.astype(np.float64)))
        rhs = float(np.vdot(x.astype(np.float64), transpose_project(y, geom, wrong).astype(np.float64)))
        proj_err = abs(lhs - rhs) / max(abs(lhs), 1e-30)
        fdk_err = proj_err
    else:
        proj_err = adjoint_test(geom, grid, seed=seed, dtype=dtype)
        fdk_err = fdk_adjoint_test(geom, grid, seed=seed, dtype=dtype)

    ok = proj_err <= tol and fdk_err <= tol
    bits = "f64" if use_f64 else "f32"
    print(f"projector adjoint relative error ({bits}): {proj_err:.3e} (tolerance {tol:.0e}): "
          f"{'PASS' if proj_err <= tol else 'FAIL'}")
    print(f"fdk chain adjoint relative error ({bits}): {fdk_err:.3e} (tolerance {tol:.0e}): "
          f"{'PASS' if fdk_err <= tol else 'FAIL'}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
