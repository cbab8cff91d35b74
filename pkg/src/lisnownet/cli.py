"""Command-line entry point: ``lisnownet <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error (bad or
missing input files; the message names the frame), 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from lisnownet import baselines, evalbench
from lisnownet.autodiff import ParamStore
from lisnownet.cloud_io import (
    DatasetManifest,
    LabelMismatchError,
    MalformedFileError,
    Sequence,
    load_bin,
    read_manifest,
    save_cloud,
    write_manifest,
)
from lisnownet.config import ConfigError, RunConfig, dump_config, load_config, parse_lines, write_thresholds
from lisnownet.model import init_params
from lisnownet.predict import denoise, snow_mask, tune_thresholds
from lisnownet.range_image import EmptyInputError
from lisnownet.training import NonFiniteLossError, train

logger = logging.getLogger("lisnownet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
METHODS = ("lisnownet", "dror", "dsor", "median")
STATS_FIELDS = [
    "frame", "points", "kept", "removed", "dropped", "snow_pixels",
    "residual_d_mean", "residual_i_mean", "residual_d_max", "residual_i_max",
]
TRAIN_LOG_FIELDS = ["epoch", "lr", "total", "fft", "dwt", "residual"]


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- helpers


def _resolve_ckpt(path):
    path = Path(path)
    if path.is_dir():
        path = path / "final.lsnp"
    if not path.is_file():
        raise DataError(f"{path}: checkpoint not found")
    return path


def _run_config(args, ckpt=None) -> RunConfig:
    """defaults < checkpoint sidecar < --config < thresholds file < flags."""
    cfg = RunConfig()
    if ckpt is not None and (ckpt.parent / "run.cfg").is_file():
        cfg = load_config(ckpt.parent / "run.cfg", cfg)
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    if getattr(args, "thresholds", None):
        cfg = load_config(args.thresholds, cfg)
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    for flag, key in (("seed", "train.seed"), ("epochs", "train.epochs"), ("batch_size", "train.batch_size"),
                      ("beams", "proj.h"), ("cols", "proj.w")):
        if getattr(args, flag, None) is not None:
            overrides[key] = str(getattr(args, flag))
    if getattr(args, "snow_ids", None):
        overrides["snow_ids"] = args.snow_ids
    return cfg.with_overrides(overrides)


def _load_params(ckpt):
    try:
        return ParamStore.load(ckpt)
    except (OSError, ValueError) as exc:
        raise DataError(f"{ckpt}: {exc}") from None


def _load_frame(path, labels_path=None):
    try:
        return load_bin(path, labels_path)
    except FileNotFoundError as exc:
        raise DataError(f"{path}: missing file {exc.filename}") from None
    except (MalformedFileError, LabelMismatchError) as exc:
        raise DataError(f"frame {path}: {exc}") from None


def _read_manifest(path):
    try:
        return read_manifest(path)
    except FileNotFoundError:
        raise DataError(f"{path}: manifest not found") from None
    except (MalformedFileError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _label_for(bin_path: Path):
    """Sibling ``.label`` file, or ``labels/<stem>.label`` next to a ``velodyne/`` directory."""
    sibling = bin_path.with_suffix(".label")
    if sibling.is_file():
        return sibling
    if bin_path.parent.name == "velodyne":
        kitti = bin_path.parent.parent / "labels" / f"{bin_path.stem}.label"
        if kitti.is_file():
            return kitti
    return None


def _bin_files(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    files = sorted(directory.rglob("*.bin"))
    if not files:
        raise DataError(f"{directory}: no .bin frames found")
    return files


def _map_jobs(fn, items, jobs):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _labeled_frames(manifest: DatasetManifest, jobs=1):
    entries = list(manifest.frames())
    if not entries:
        raise DataError("manifest lists no frames")
    for _, path, lab in entries:
        if lab is None:
            raise DataError(f"frame {path}: no labels in manifest")
    return _map_jobs(lambda e: _load_frame(e[1], e[2]), entries, jobs)


def _mask_fn(method, cfg: RunConfig, params=None):
    if method == "lisnownet":
        if params is None:
            raise UsageError("method lisnownet needs --ckpt")
        return lambda cloud: snow_mask(params, cfg.thresholds, cloud, cfg.proj, cfg.net)
    if method == "dror":
        return lambda cloud: baselines.dror(cloud, cfg.dror)
    if method == "dsor":
        return lambda cloud: baselines.dsor(cloud, cfg.dsor)
    if method == "median":
        return lambda cloud: baselines.median_point_mask(cloud, cfg.median, cfg.proj)
    raise UsageError(f"unknown method {method!r}")


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _write_rows(path, fields, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


# ---------------------------------------------------------------- commands


def cmd_train(args):
    cfg = _run_config(args)
    manifest = _read_manifest(args.manifest)
    clouds = _map_jobs(lambda e: _load_frame(e[1]), list(manifest.frames()), args.jobs)
    if not clouds:
        raise DataError(f"{args.manifest}: manifest lists no frames")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "run.cfg")
    params, history = train(clouds, cfg.net, cfg.train, cfg.loss, cfg.proj, checkpoint_dir=out)
    shutil.copyfile(out / f"epoch_{cfg.train.epochs - 1:03d}.lsnp", out / "final.lsnp")
    _write_rows(out / "train_log.csv", TRAIN_LOG_FIELDS, history)
    logger.info("trained %d epochs on %d frames -> %s", cfg.train.epochs, len(clouds), out / "final.lsnp")
    return EXIT_OK


def cmd_denoise(args):
    ckpt = _resolve_ckpt(args.ckpt)
    cfg = _run_config(args, ckpt)
    params = _load_params(ckpt)
    src, out = Path(args.input), Path(args.out)
    files = _bin_files(src)

    def one(path):
        cloud = _load_frame(path, _label_for(path))
        try:
            kept, removed, stats = denoise(params, cfg.thresholds, cloud, cfg.proj, cfg.net)
        except EmptyInputError as exc:
            raise DataError(f"frame {path}: {exc}") from None
        rel = path.relative_to(src)
        for part, sub in ((kept, "kept"), (removed, "removed")):
            dest = out / sub / rel
            save_cloud(part, dest, dest.with_suffix(".label") if part.labels is not None else None)
        return {"frame": str(rel), **stats}

    rows = _map_jobs(one, files, args.jobs)
    _write_rows(out / "stats.csv", STATS_FIELDS, rows)
    dump_config(cfg, out / "run.cfg")
    logger.info("denoised %d frames, removed %d points", len(rows), sum(r["removed"] for r in rows))
    return EXIT_OK


def cmd_eval(args):
    ckpt = _resolve_ckpt(args.ckpt) if args.ckpt else None
    cfg = _run_config(args, ckpt)
    params = _load_params(ckpt) if ckpt else None
    method = _mask_fn(args.method, cfg, params)
    manifest = _read_manifest(args.manifest)
    entries = list(manifest.frames())
    frames = _labeled_frames(manifest, args.jobs)

    def one(item):
        (_, path, _), cloud = item
        t0 = time.perf_counter()
        try:
            pred = method(cloud)
        except (EmptyInputError, baselines.TooFewPointsError) as exc:
            raise DataError(f"frame {path}: {exc}") from None
        elapsed = (time.perf_counter() - t0) * 1e3
        return evalbench.evaluate(pred, cloud.labels, cfg.snow_ids), elapsed

    if args.timing and args.jobs > 1:
        raise UsageError("--timing needs --jobs 1 so frames are timed serially")
    results = _map_jobs(one, list(zip(entries, frames)), args.jobs)
    latency = [ms for _, ms in results] if args.timing else ()
    report = evalbench.MetricsReport.from_frames([c for c, _ in results], latency)
    evalbench.write_csv([report.row(args.method)], args.csv, evalbench.METRICS_FIELDS)
    print(f"{args.method}: precision {report.precision:.4f} recall {report.recall:.4f} iou {report.iou:.4f}")
    return EXIT_OK


def cmd_bench(args):
    ckpt = _resolve_ckpt(args.ckpt) if args.ckpt else None
    cfg = _run_config(args, ckpt)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    params = _load_params(ckpt) if ckpt else None
    if "lisnownet" in methods and params is None:
        # latency does not depend on the weights
        logger.warning("no --ckpt given; timing an untrained network")
        params = init_params(cfg.net, seed=cfg.train.seed, dtype=np.float32)
    frames = [_load_frame(p) for p in _bin_files(args.frames)]
    rows = []
    for m in methods:
        stats = evalbench.benchmark(_mask_fn(m, cfg, params), frames, warmup=args.warmup, reps=args.reps)
        rows.append(evalbench.bench_row(m, frames, stats, args.reps))
        print(f"{m}: mean {stats['mean_ms']:.2f} ms  p95 {stats['p95_ms']:.2f} ms")
    evalbench.write_csv(rows, args.csv, evalbench.BENCH_FIELDS)
    return EXIT_OK


def _read_grid(path):
    try:
        raw = parse_lines(Path(path).read_text(), str(path))
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    grid = {}
    for key in ("n_d", "n_i", "delta_bar"):
        text = raw.pop(key, None)
        if text is None:
            raise ConfigError(f"{path}: grid needs {key}")
        if text.startswith("logspace:"):
            lo, hi, n = text.split(":")[1:]
            grid[key] = np.logspace(float(lo), float(hi), int(n)).tolist()
        else:
            grid[key] = [float(v) for v in text.split(",")]
    if raw:
        raise ConfigError(f"{path}: unknown grid keys {sorted(raw)}")
    return grid


def cmd_tune(args):
    ckpt = _resolve_ckpt(args.ckpt)
    cfg = _run_config(args, ckpt)
    params = _load_params(ckpt)
    grid = _read_grid(args.grid) if args.grid else None
    frames = _labeled_frames(_read_manifest(args.manifest), args.jobs)
    best, table = tune_thresholds(params, frames, grid, cfg.snow_ids, cfg.proj, cfg.net)
    if args.table:
        _write_rows(args.table, ["n_d", "n_i", "delta_bar", "tp", "fp", "fn", "precision", "recall", "iou"], [
            {"n_d": th.n_d, "n_i": th.n_i, "delta_bar": th.delta_bar, "tp": c.tp, "fp": c.fp, "fn": c.fn,
             "precision": c.precision, "recall": c.recall, "iou": c.iou}
            for th, c in table
        ])
    out = Path(args.out) if args.out else ckpt.parent / "thresholds.cfg"
    write_thresholds(best, out)
    print(f"n_d={best.n_d!r} n_i={best.n_i!r} delta_bar={best.delta_bar!r} -> {out}")
    return EXIT_OK


def cmd_synth(args):
    cfg = _run_config(args)
    out = Path(args.out)
    seeds = np.random.SeedSequence(args.seed).generate_state(args.frames, dtype=np.uint32).tolist()

    def one(i):
        cloud = evalbench.synth_scene(int(seeds[i]), snow_rate=args.snow_rate, cfg=cfg.proj)
        bin_path = out / "velodyne" / f"{i:06d}.bin"
        label_path = out / "labels" / f"{i:06d}.label"
        (out / "labels").mkdir(parents=True, exist_ok=True)
        save_cloud(cloud, bin_path, label_path)
        return bin_path, label_path

    try:
        paths = _map_jobs(one, list(range(args.frames)), args.jobs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    bins = [p for p, _ in paths]
    labels = [lab for _, lab in paths]
    write_manifest(DatasetManifest([Sequence("00", bins, labels)]), out / "manifest.txt")
    # frames are independent scenes recorded from one spot
    evalbench.write_poses([evalbench.Pose.identity()] * len(bins), out / "poses.txt")
    dump_config(cfg, out / "run.cfg")
    logger.info("wrote %d frames to %s", len(bins), out)
    return EXIT_OK


def cmd_map(args):
    files = _bin_files(args.input)
    try:
        poses = evalbench.read_poses(args.poses)
    except FileNotFoundError:
        raise DataError(f"{args.poses}: poses file not found") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if len(poses) != len(files):
        raise DataError(f"{args.poses}: {len(poses)} poses for {len(files)} frames in {args.input}")
    clouds = [_load_frame(p) for p in files]
    if args.voxel is not None and args.voxel <= 0:
        raise UsageError("--voxel must be positive")
    merged = evalbench.accumulate_map(clouds, poses, args.voxel)
    save_cloud(merged, args.out)
    print(f"map: {len(merged)} points from {len(files)} frames -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--jobs", type=int, default=1, help="frame-parallel workers (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="lisnownet", description="Unsupervised LiDAR snow removal")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train the network on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", parents=[common], help="split frames into kept/ and removed/")
    p.add_argument("--ckpt", required=True, help="checkpoint file or training directory")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--thresholds")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", parents=[common], help="snow precision / recall / IoU on labelled frames")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--manifest", required=True)
    p.add_argument("--snow-ids", help="comma-separated label ids counted as snow")
    p.add_argument("--csv", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--thresholds")
    p.add_argument("--timing", action="store_true", help="fill the latency columns (not byte-reproducible)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="per-frame latency of each method")
    p.add_argument("--methods", required=True, help="comma-separated subset of " + ",".join(METHODS))
    p.add_argument("--frames", required=True, help="directory of .bin frames")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--csv", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--thresholds")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("tune", parents=[common], help="grid-search decision thresholds")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--grid", help="grid file with n_d, n_i, delta_bar lines")
    p.add_argument("--snow-ids")
    p.add_argument("--out", help="thresholds file (default: next to the checkpoint)")
    p.add_argument("--table", help="optional CSV of every candidate")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("synth", parents=[common], help="write labelled synthetic frames")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--snow-rate", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beams", type=int)
    p.add_argument("--cols", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("map", parents=[common], help="accumulate frames into one cloud using poses")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--voxel", type=float)
    p.set_defaults(func=cmd_map)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
        )
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
