"""Command-line interface.

Subcommands:
  make-views   render a ground-truth multi-view dataset from a mesh
  fit          optimize a mesh to a dataset
  eval         compare a fitted mesh against a dataset's ground truth
  export       convert a mesh to a Gaussian point-cloud PLY

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .camera import CameraError
from .config import ConfigError, RunConfig, config_to_text, load_config
from .convert import convert_mesh, export_gaussians
from .dataset import load_views, make_views
from .mesh import MeshError, load_mesh, make_icosphere
from .metrics import chamfer_distance, image_metrics, normal_consistency
from .optim import fit, shift_initialization
from .render import render_mesh


def _parse_resolution(text: str):
    if "x" in text:
        w, _, h = text.partition("x")
        return int(w), int(h)
    side = int(text)
    return side, side


def _cmd_make_views(args) -> int:
    dataset = make_views(
        args.mesh,
        n_views=args.n_views,
        resolution=_parse_resolution(args.resolution),
        radius=args.radius,
        up=args.up,
        seed=args.seed,
        out_dir=args.out,
    )
    print(f"wrote {len(dataset)} views to {dataset.root}")
    return 0


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    updates = {}
    for name in ("dataset_dir", "out_dir", "iterations", "batch_size", "seed",
                 "dtype", "init_mesh", "init_facets", "checkpoint_every",
                 "eval_every"):
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    if getattr(args, "shift", None) is not None:
        parts = [float(p) for p in args.shift.replace(",", " ").split()]
        if len(parts) != 3:
            raise ConfigError(f"shift needs 3 numbers, got {args.shift!r}")
        updates["shift"] = tuple(parts)
    return replace(cfg, **updates) if updates else cfg


def _cmd_fit(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = _apply_overrides(cfg, args)
    if not cfg.dataset_dir:
        raise ConfigError("dataset_dir is required (flag --dataset-dir or config)")
    if not cfg.out_dir:
        raise ConfigError("out_dir is required (flag --out-dir or config)")
    if cfg.cov_path != "embed":
        raise ConfigError("fitting requires cov_path = embed; the eigen path "
                          "has no backward and is export-only")

    dataset = load_views(cfg.dataset_dir)
    train = dataset.train_indices
    if not train:
        train = list(range(len(dataset)))
    cams = [dataset.cameras[i] for i in train]
    rgbs = [dataset.load_rgb(i) for i in train]
    masks = [dataset.load_mask(i) for i in train]

    if cfg.init_mesh:
        mesh = load_mesh(cfg.init_mesh)
    else:
        mesh = make_icosphere(cfg.init_facets)
    if any(cfg.shift):
        mesh = shift_initialization(mesh, cfg.shift)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.txt").write_text(
        f"# run manifest\nversion = {__version__}\n" + config_to_text(cfg))

    reference = None
    if cfg.eval_every > 0:
        ref_path = dataset.target_mesh_path()
        if ref_path.exists():
            reference = load_mesh(ref_path)

    result = fit(mesh, cams, rgbs, masks, cfg.fit_config(), out_dir=out,
                 reference_mesh=reference)

    from .figures import plot_view_grid
    preview = train[: min(4, len(train))]
    rendered = [render_mesh(result.mesh, dataset.cameras[i]).rgb for i in preview]
    targets = [dataset.load_rgb(i) for i in preview]
    plot_view_grid(rendered, targets, out / "final_views.png")
    if result.history:
        print(f"fit finished in {result.wall_time:.1f}s; "
              f"final total loss {result.history[-1]['total']:.6f}")
    else:
        print("fit finished (no iterations)")
    return 0


def _cmd_eval(args) -> int:
    pred = load_mesh(args.pred)
    dataset = load_views(args.dataset_dir)
    gt_path = Path(args.gt) if args.gt else dataset.target_mesh_path()
    if not gt_path.exists():
        raise FileNotFoundError(f"ground-truth mesh not found: {gt_path}")
    gt = load_mesh(gt_path)

    cd = chamfer_distance(pred, gt, n_samples=args.n_samples, seed=args.seed)
    nc = normal_consistency(pred, gt, n_samples=args.n_samples, seed=args.seed)

    holdout = dataset.holdout_indices
    rendered = [render_mesh(pred, dataset.cameras[i]).rgb for i in holdout]
    targets = [dataset.load_rgb(i) for i in holdout]
    psnr_views, ssim_views = image_metrics(rendered, targets)
    psnr_mean = float(np.mean(psnr_views))
    ssim_mean = float(np.mean(ssim_views))

    print(f"chamfer_distance {cd:.8g}")
    print(f"normal_consistency {nc:.6f}")
    print(f"psnr_mean {psnr_mean:.4f}")
    print(f"ssim_mean {ssim_mean:.6f}")

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["view", "psnr", "ssim"])
            for i, (p, s) in zip(holdout, zip(psnr_views, ssim_views)):
                writer.writerow([i, p, s])
            writer.writerow(["mean", psnr_mean, ssim_mean])
            writer.writerow(["chamfer_distance", cd, ""])
            writer.writerow(["normal_consistency", nc, ""])
        from .figures import plot_metric_bars, plot_view_grid
        names = [f"v{i}" for i in holdout]
        plot_metric_bars(names, psnr_views, ssim_views, out / "metrics.png")
        plot_view_grid(rendered, targets, out / "holdout_views.png")
    return 0


def _cmd_export(args) -> int:
    mesh = load_mesh(args.mesh)
    cloud = convert_mesh(mesh, path=args.path, rescale=not args.no_rescale)
    export_gaussians(cloud, args.out)
    print(f"exported {len(cloud)} gaussians to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshsplat",
        description="Differentiable mesh rendering via per-triangle Gaussians.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    mk = sub.add_parser("make-views", help="render a ground-truth dataset")
    mk.add_argument("--mesh", required=True, help="target mesh (OBJ or PLY)")
    mk.add_argument("--out", required=True, help="dataset output directory")
    mk.add_argument("--n-views", type=int, default=253)
    mk.add_argument("--resolution", default="256", help="SIDE or WxH")
    mk.add_argument("--radius", type=float, default=3.0)
    mk.add_argument("--up", default="z", choices=("x", "y", "z"))
    mk.add_argument("--seed", type=int, default=0)
    mk.set_defaults(func=_cmd_make_views)

    ft = sub.add_parser("fit", help="optimize a mesh to a dataset")
    ft.add_argument("--config", help="key = value config file")
    ft.add_argument("--dataset-dir", dest="dataset_dir")
    ft.add_argument("--out-dir", dest="out_dir")
    ft.add_argument("--iterations", type=int)
    ft.add_argument("--batch-size", dest="batch_size", type=int)
    ft.add_argument("--seed", type=int)
    ft.add_argument("--dtype", choices=("float32", "float64"))
    ft.add_argument("--init-mesh", dest="init_mesh")
    ft.add_argument("--init-facets", dest="init_facets", type=int)
    ft.add_argument("--shift", help="initial offset, e.g. '0.5,0,0'")
    ft.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    ft.add_argument("--eval-every", dest="eval_every", type=int)
    ft.set_defaults(func=_cmd_fit)

    ev = sub.add_parser("eval", help="evaluate a fitted mesh")
    ev.add_argument("--pred", required=True, help="fitted mesh file")
    ev.add_argument("--dataset-dir", dest="dataset_dir", required=True)
    ev.add_argument("--gt", help="ground-truth mesh (default: dataset target)")
    ev.add_argument("--out", help="directory for metrics.csv and figures")
    ev.add_argument("--n-samples", dest="n_samples", type=int, default=100_000)
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(func=_cmd_eval)

    ex = sub.add_parser("export", help="export Gaussians to PLY")
    ex.add_argument("--mesh", required=True)
    ex.add_argument("--out", required=True)
    ex.add_argument("--path", default="embed", choices=("embed", "eigen"))
    ex.add_argument("--no-rescale", action="store_true")
    ex.set_defaults(func=_cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, MeshError, CameraError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
