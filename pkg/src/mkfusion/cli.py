"""Command-line front end: ``mkfusion <command> ...``.

Commands: ``simulate``, ``train``, ``fuse``, ``eval``, ``export-kernels``
and ``sweep``.  Exit codes: 0 success, 1 usage error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig
from .data import (build_bucket, degrade_to, read_manifest, read_tensor, write_manifest,
                   write_tensor)
from .errors import MKFusionError, NumericError
from .metrics import MetricsReport, evaluate
from .mk import export_kernel_slabs
from .model import fuse
from .resize import bicubic_resize
from .tensor import Tensor
from .train import train

__all__ = ["main", "build_parser", "target_size"]

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def target_size(h: int, w: int, scale: float) -> tuple[int, int]:
    """``round(h * scale)`` with halves rounded up."""
    if not scale >= 1:
        raise UsageError(f"--scale must be >= 1, got {scale}")
    return int(math.floor(h * scale + 0.5)), int(math.floor(w * scale + 0.5))


def _load_config(path, seed) -> RunConfig:
    cfg = RunConfig.load(path) if path else RunConfig.defaults()
    if seed is not None:
        cfg.override("run.seed", seed)
        cfg.validate()
    return cfg


def _dataset_id(C: int, c: int) -> str:
    return f"syn{C}x{c}"


# --- commands -------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _load_config(args.config, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.resolved.txt")
    seed = cfg["run.seed"]
    for C, c in cfg.buckets:
        ds = _dataset_id(C, c)
        for split, n_images, split_seed in (("train", cfg["data.train_images"], seed),
                                            ("test", cfg["data.test_images"], seed + 7919)):
            bucket = build_bucket(ds, C, c, cfg["data.scale"], split_seed, n_images,
                                  cfg["data.image_size"], cfg["data.patch"],
                                  smoothness=cfg["data.smoothness"])
            sub = out / ds / split
            sub.mkdir(parents=True, exist_ok=True)
            paths = []
            for i, s in enumerate(bucket.samples):
                names = tuple(f"{ds}/{split}/{i:05d}_{tag}.hst" for tag in ("y", "z", "x"))
                for name, arr in zip(names, (s.y_lr, s.z_hr, s.x_hr)):
                    write_tensor(out / name, arr)
                paths.append(names)
            write_manifest(out / f"{split}_{ds}.tsv", bucket, paths)
            print(f"{split}\t{ds}\tC={C}\tc={c}\tscale={cfg['data.scale']}\tsamples={len(bucket)}")
    return EXIT_OK


def _manifests(data_dir: Path, split: str) -> list[Path]:
    found = sorted(data_dir.glob(f"{split}_*.tsv"))
    if not found:
        raise FileNotFoundError(f"no {split}_*.tsv manifest in {data_dir}; run 'simulate' first")
    return found


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed)
    out = Path(args.out_dir)
    buckets = [read_manifest(p) for p in _manifests(Path(args.data_dir), "train")]
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.resolved.txt")
    tc = cfg.train_config()
    try:
        result = train(tc, buckets, out, resume=args.resume)
    except NumericError as exc:
        print(f"error: {exc}; last good checkpoint kept in {out}", file=sys.stderr)
        return EXIT_NUMERIC
    first, last = result.probe[0], result.probe[-1]
    print(f"trained {tc.steps} steps on {len(buckets)} buckets; probe L1 {first[1]:.6f} -> {last[1]:.6f}")
    print(f"checkpoint: {out / 'final.ssa'}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    model = load_checkpoint(args.checkpoint).model
    y = read_tensor(args.y_lr)
    z = read_tensor(args.z_hr)
    h, w = y.shape[2:]
    if args.out_size:
        H, W = args.out_size
    else:
        H, W = target_size(h, w, args.scale)
    if z.shape[2:] != (H, W):
        z = bicubic_resize(Tensor(z), H, W).data
    out = fuse(model, y, z).data
    if not np.all(np.isfinite(out)):
        raise NumericError("fused output contains non-finite values")
    write_tensor(args.out, out)
    print(f"wrote {args.out}: shape {out.shape}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred, gt = read_tensor(args.pred), read_tensor(args.gt)
    report = evaluate(pred, gt, args.scale, args.peak)
    row = report.csv_row(args.dataset, args.scale)
    print(",".join(MetricsReport.COLUMNS))
    print(",".join(row))
    if report.zero_norm_pixels:
        print(f"warning: {report.zero_norm_pixels} zero-norm spectra in SAM", file=sys.stderr)
    if report.ssim_window_shrunk:
        print("warning: SSIM window shrunk to fit the image", file=sys.stderr)
    if args.csv:
        path = Path(args.csv)
        new = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="") as fh:
            writer = csv.writer(fh)
            if new:
                writer.writerow(MetricsReport.COLUMNS)
            writer.writerow(row)
    return EXIT_OK


def cmd_export_kernels(args) -> int:
    model = load_checkpoint(args.checkpoint).model
    rows = export_kernel_slabs(args.out_csv, {"mk_in": model.mk_in, "mk_out": model.mk_out})
    print(f"wrote {rows} slab rows to {args.out_csv}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    """Scale vs PSNR for the model and plain bicubic on held-out patches."""
    cfg = _load_config(args.config, args.seed)
    model = load_checkpoint(args.checkpoint).model
    scales = [float(s) for s in args.scales.split(",")] if args.scales else cfg.scales
    n = cfg["eval.patches"]
    peak = cfg["eval.peak"]
    rows = []
    for manifest in _manifests(Path(args.data_dir), "test"):
        bucket = read_manifest(manifest)
        for r in scales:
            acc: dict[str, list[MetricsReport]] = {"ours": [], "bicubic": []}
            for s in bucket.samples[:n]:
                H, W = s.x_hr.shape[2:]
                h, w = max(1, round(H / r)), max(1, round(W / r))
                y = degrade_to(s.x_hr, h, w)
                acc["ours"].append(evaluate(fuse(model, y, s.z_hr).data, s.x_hr, r, peak))
                acc["bicubic"].append(evaluate(bicubic_resize(Tensor(y), H, W).data, s.x_hr, r, peak))
            for method, reps in acc.items():
                rows.append([bucket.dataset_id, f"{r:g}", method,
                             f"{np.mean([m.psnr for m in reps]):.6f}",
                             f"{np.mean([m.sam for m in reps]):.6f}",
                             f"{np.mean([m.ssim for m in reps]):.6f}"])
    header = ["dataset", "scale", "method", "psnr", "sam_deg", "ssim"]
    with open(args.out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    for row in rows:
        print("\t".join(row))
    return EXIT_OK


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mkfusion", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="synthesize train/test buckets under Wald's protocol")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="joint training over every bucket in a data directory")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("data_dir")
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("fuse", help="fuse an LR-HSI / HR-MSI pair at any output size")
    s.add_argument("checkpoint")
    s.add_argument("y_lr")
    s.add_argument("z_hr")
    size = s.add_mutually_exclusive_group(required=True)
    size.add_argument("--scale", type=float)
    size.add_argument("--out-size", type=int, nargs=2, metavar=("H", "W"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("eval", help="quality indexes of a prediction against a reference")
    s.add_argument("pred")
    s.add_argument("gt")
    s.add_argument("--scale", type=float, required=True)
    s.add_argument("--peak", type=float, default=1.0)
    s.add_argument("--dataset", default="-")
    s.add_argument("--csv", help="append the row to this CSV file")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export-kernels", help="dump MK channel slabs as CSV")
    s.add_argument("checkpoint")
    s.add_argument("out_csv")
    s.set_defaults(func=cmd_export_kernels)

    s = sub.add_parser("sweep", help="PSNR vs scale for the model and bicubic")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--scales", help="comma-separated, overrides eval.scales")
    s.add_argument("checkpoint")
    s.add_argument("data_dir")
    s.add_argument("out_csv")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"mkfusion: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mkfusion: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"mkfusion: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MKFusionError, OSError) as exc:
        print(f"mkfusion: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
