"""Command line entry point: ``u3ds3 <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

# flag name -> config key for options shared with the config file
_CONFIG_FLAGS = ("cell", "block", "pts", "gamma", "voxel_res", "seed_res", "road_ransac", "classes",
                 "res", "dim", "widths", "epochs", "batch", "lr", "wd", "seed", "single_pathway",
                 "deterministic", "brightness", "contrast", "perturb")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _widths(text):
    return tuple(int(v) for v in text.split(","))


def _add_config_flags(p, *names):
    spec = {
        "cell": dict(type=float, help="downsampling cell size in m (0.03)"),
        "block": dict(type=float, help="block side in m (1.5)"),
        "pts": dict(type=int, help="points per block (4096)"),
        "gamma": dict(type=int, help="target superpoint count (40)"),
        "voxel_res": dict(type=float, help="supervoxel resolution in m (0.03)"),
        "seed_res": dict(type=float, help="supervoxel seed spacing in m (0.5, 2.0 with road RANSAC)"),
        "road_ransac": dict(action="store_true", default=None, help="fit a road plane first"),
        "classes": dict(type=int, help="number of clusters K (required for training)"),
        "res": dict(type=int, help="voxel grid resolution (32)"),
        "dim": dict(type=int, help="feature dimension (128)"),
        "widths": dict(type=_widths, help="comma separated layer widths, 12 first, dim last"),
        "epochs": dict(type=int, help="training epochs (10)"),
        "batch": dict(type=int, help="blocks per batch (4)"),
        "lr": dict(type=float, help="learning rate (1e-4)"),
        "wd": dict(type=float, help="weight decay (1e-5)"),
        "seed": dict(type=int, help="random seed (0)"),
        "single_pathway": dict(action="store_true", default=None, help="train one pathway only"),
        "deterministic": dict(action="store_true", default=None,
                              help="single BLAS thread for bit-reproducible output"),
        "brightness": dict(type=float, help="brightness jitter range (0.2)"),
        "contrast": dict(type=float, help="contrast jitter range (0.2)"),
        "perturb": dict(type=float, help="centroid perturbation sigma (1e-4)"),
    }
    for name in names:
        p.add_argument("--" + name.replace("_", "-"), dest=name, **spec[name])


def build_parser():
    parser = _Parser(prog="u3ds3", description="Unsupervised 3D semantic segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="generate a labeled synthetic room")
    p.add_argument("--spec", help="key = value scene spec file (defaults when omitted)")
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.add_argument("--out", required=True)

    p = sub.add_parser("preprocess", help="downsample, estimate normals, report blocks")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p, "cell", "block", "pts", "seed")
    p.add_argument("--config")

    p = sub.add_parser("superpoints", help="compute merged superpoints of a preprocessed cloud")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="superpoint file, one id per line")
    _add_config_flags(p, "gamma", "voxel_res", "seed_res", "road_ransac", "seed")
    p.add_argument("--config")

    p = sub.add_parser("train", help="train on a directory of PLY scenes")
    p.add_argument("--data", help="directory of preprocessed *.ply (with optional *.sp files)")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--report", help="per-epoch metrics CSV (needs labeled scenes)")
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    _add_config_flags(p, *[n for n in _CONFIG_FLAGS if n != "cell"])

    p = sub.add_parser("segment", help="label a preprocessed cloud with a trained model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--sp", help="superpoint file (computed when omitted)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="Hungarian-matched metrics of predictions")
    p.add_argument("--pred", required=True, nargs="+", help="labeled PLY or label file per scene")
    p.add_argument("--gt", required=True, nargs="+", help="labeled PLY per scene")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--out", help="report CSV")

    p = sub.add_parser("export-ply", help="color a cloud by per-point labels")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--labels", required=True, help="one integer per line (e.g. a superpoint file)")
    p.add_argument("--out", required=True)

    sub.add_parser("selftest", help="run fast invariant checks")
    return parser


def _set_threads(args):
    n = os.environ.get("U3DS3_THREADS")
    if getattr(args, "deterministic", None):
        n = "1"
    if n:
        if not n.isdigit() or int(n) < 1:
            raise UsageError("U3DS3_THREADS must be a positive integer")
        for var in _THREAD_VARS:
            os.environ[var] = n


def _resolve_config(args):
    from .config import Config, read_config_file

    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for name in _CONFIG_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    try:
        return Config(**values)
    except TypeError as e:
        raise UsageError(str(e)) from e


def palette(k):
    """Fixed, well separated colors for label ids (cycled beyond the table)."""
    import numpy as np

    base = np.array([
        [0.90, 0.10, 0.10], [0.10, 0.60, 0.90], [0.20, 0.80, 0.20], [0.95, 0.75, 0.10],
        [0.60, 0.30, 0.80], [0.95, 0.50, 0.70], [0.40, 0.25, 0.10], [0.10, 0.80, 0.75],
        [0.50, 0.50, 0.50], [0.70, 0.90, 0.30], [0.10, 0.20, 0.50], [0.90, 0.50, 0.20],
    ])
    return base[np.arange(k) % len(base)]


def _read_labels(path, n=None):
    import numpy as np

    from .pointcloud import load_ply

    if str(path).lower().endswith(".ply"):
        cloud = load_ply(path)
        if cloud.gt_labels is None:
            raise ValueError(f"{path}: no label property")
        labels = cloud.gt_labels
    else:
        labels = np.loadtxt(path, dtype=np.int64, ndmin=1)
    if n is not None and len(labels) != n:
        raise ValueError(f"{path}: {len(labels)} labels for {n} points")
    return labels


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(args):
    from .pointcloud import SceneSpec, gen_synthetic, write_ply

    spec = SceneSpec.from_file(args.spec) if args.spec else SceneSpec()
    if args.seed is not None:
        spec = SceneSpec(**{**spec.__dict__, "seed": args.seed})
    cloud = gen_synthetic(spec)
    write_ply(args.out, cloud)
    print(f"{len(cloud)} points, {spec.n_classes} classes -> {args.out}")


def cmd_preprocess(args):
    from .pointcloud import estimate_normals, grid_downsample, load_ply, sample_blocks, write_ply

    cfg = _resolve_config(args)
    cloud = load_ply(args.input)
    cloud = grid_downsample(cloud, cfg.cell)
    cloud = estimate_normals(cloud, cfg.normal_k)
    blocks = sample_blocks(cloud, cfg.block, cfg.pts, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    target = out / Path(args.input).name
    write_ply(target, cloud)
    print(f"{len(cloud)} points after downsampling, {len(blocks)} blocks -> {target}")


def cmd_superpoints(args):
    from .pointcloud import estimate_normals, load_ply
    from .superpoint import compute_superpoints, save_sp

    cfg = _resolve_config(args)
    cloud = load_ply(args.input)
    if cloud.normals is None:
        cloud = estimate_normals(cloud, cfg.normal_k)
    part = compute_superpoints(cloud, cfg.gamma, cfg.voxel_res, cfg.seed_res, cfg.road_ransac, cfg.seed)
    save_sp(args.out, part.sp_id)
    print(f"{part.count} superpoints -> {args.out}")


def _load_scenes(data, cfg):
    from .pointcloud import estimate_normals, load_ply
    from .superpoint import compute_superpoints, load_sp
    from .trainer import Scene

    paths = sorted(Path(data).glob("*.ply"))
    if not paths:
        raise ValueError(f"no .ply files in {data}")
    scenes = []
    for path in paths:
        cloud = load_ply(path)
        if cloud.normals is None:
            cloud = estimate_normals(cloud, cfg.normal_k)
        sp_path = path.with_suffix(".sp")
        if sp_path.exists():
            sp = load_sp(sp_path, len(cloud))
        else:
            sp = compute_superpoints(cloud, cfg.gamma, cfg.voxel_res, cfg.seed_res,
                                     cfg.road_ransac, cfg.seed).sp_id
        scenes.append(Scene(cloud, sp))
    return scenes


def cmd_train(args):
    cfg = _resolve_config(args)
    if args.dump_config:
        sys.stdout.write(cfg.dump())
        return
    if cfg.classes is None:
        raise UsageError("--classes is required")
    if not args.data or not args.out:
        raise UsageError("--data and --out are required")
    from .trainer import save_state, train

    scenes = _load_scenes(args.data, cfg)
    labeled = all(sc.cloud.gt_labels is not None for sc in scenes)
    if args.report and not labeled:
        raise ValueError("--report needs ground-truth labels in every scene")
    state, reports = train(scenes, cfg, evaluate_each_epoch=bool(args.report))
    save_state(args.out, state)
    if args.report:
        rows = [reports[0].csv_header()] + [r.csv_row() for r in reports]
        Path(args.report).write_text("".join(",".join(map(str, r)) + "\n" for r in rows))
        print(reports[-1].to_text())
    print(f"trained {state.epoch} epochs on {len(scenes)} scenes -> {args.out}")


def cmd_segment(args):
    from .pointcloud import estimate_normals, load_ply, write_ply
    from .superpoint import compute_superpoints, load_sp
    from .trainer import infer_labels, load_state

    state = load_state(args.ckpt)
    cfg = state.config
    cloud = load_ply(args.input)
    if cloud.normals is None:
        cloud = estimate_normals(cloud, cfg.normal_k)
    if args.sp:
        sp = load_sp(args.sp, len(cloud))
    else:
        sp = compute_superpoints(cloud, cfg.gamma, cfg.voxel_res, cfg.seed_res, cfg.road_ransac, cfg.seed).sp_id
    labels = infer_labels(state, cloud, sp)
    write_ply(args.out, cloud, labels=labels, colors=palette(cfg.classes)[labels])
    print(f"{len(cloud)} points labeled -> {args.out}")


def cmd_eval(args):
    import numpy as np

    from .evaluation import evaluate

    if len(args.pred) != len(args.gt):
        raise UsageError("--pred and --gt need the same number of files")
    gts = [_read_labels(g) for g in args.gt]
    preds = [_read_labels(p, len(g)) for p, g in zip(args.pred, gts)]
    report = evaluate(np.concatenate(preds), np.concatenate(gts), args.classes)
    if args.out:
        Path(args.out).write_text(report.to_csv())
    print(report.to_text())


def cmd_export_ply(args):
    from .pointcloud import load_ply, write_ply

    cloud = load_ply(args.input)
    labels = _read_labels(args.labels, len(cloud))
    if labels.min(initial=0) < 0:
        raise ValueError("labels must be non-negative")
    write_ply(args.out, cloud, labels=labels % 256, colors=palette(int(labels.max(initial=0)) + 1)[labels])
    print(f"{len(cloud)} points -> {args.out}")


def cmd_selftest(args):
    from .selftest import run

    if not run():
        raise ValueError("self test failed")


COMMANDS = {
    "gen-synth": cmd_gen_synth, "preprocess": cmd_preprocess, "superpoints": cmd_superpoints,
    "train": cmd_train, "segment": cmd_segment, "eval": cmd_eval, "export-ply": cmd_export_ply,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads(args)
        COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"u3ds3: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, OSError) as e:
        print(f"u3ds3: error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
