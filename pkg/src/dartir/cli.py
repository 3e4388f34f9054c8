"""Command line entry point: degrade, train, eval, gradcheck, bench, ablate.

Exit codes: 0 on success, 1 on a runtime failure (with the module's error
text on stderr), 2 on bad usage (unknown subcommand, flag, or config key).
"""

from __future__ import annotations

import argparse
import math
import os
import statistics
import sys
import time

import numpy as np

from .attention import AttentionParams, MacCounter, build_longir_mask, \
    longir_attention, longir_attention_dense
from .checks import TINY_CONFIG, block_grad_report, op_grad_reports
from .config import dart_config_from, read_config, schedule_from
from .data import ImageBuffer, Rng, add_awgn, bicubic_resize, read_pnm, write_pnm
from .errors import ConfigError, DartError, UnknownKeyError
from .metrics import MetricReport, crop_border, psnr, rgb_to_y, ssim
from .pipeline import (
    ablation_variants,
    build_eval_pairs,
    evaluate_restoration,
    train_from_values,
)
from .tensor import Tensor
from .fileio import atomic_write_bytes
from .train import load_model, restore_image, save_checkpoint

GRADCHECK_TOL = 1e-4


def _parse_int_csv(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p]


def _cmd_degrade(args) -> int:
    img = read_pnm(args.infile)
    if (args.sigma is None) == (args.scale is None):
        raise ConfigError("degrade needs exactly one of --sigma or --scale")
    if args.sigma is not None:
        out = add_awgn(img, args.sigma, Rng(args.seed))
    else:
        factor = args.scale if args.mode == "up" else 1.0 / args.scale
        out = bicubic_resize(img, factor)
    write_pnm(args.out, out)
    return 0


def _cmd_train(args) -> int:
    values = read_config(args.config)
    cfg = dart_config_from(values)
    schedule = schedule_from(values)
    model, trace = train_from_values(values, cfg, values["train.seed"], schedule)
    save_checkpoint(args.out, model)
    lines = ["iter,lr,loss"] + [entry.csv_line() for entry in trace]
    csv_path = os.path.splitext(args.out)[0] + ".loss.csv"
    atomic_write_bytes(csv_path, ("\n".join(lines) + "\n").encode("utf-8"))
    for line in lines:
        print(line)
    return 0


def _metric_plane(img: ImageBuffer, channel: str) -> np.ndarray:
    arr = img.samples.astype(np.float64)
    if img.channels == 3 and channel == "y":
        return rgb_to_y(arr)
    if img.channels == 1:
        return arr[:, :, 0]
    return arr


def _cmd_eval(args) -> int:
    model = load_model(args.ckpt)
    metrics = [m for m in args.metric.split(",") if m]
    for m in metrics:
        if m not in ("psnr", "ssim"):
            raise ConfigError(f"unknown metric {m!r}")
    names = sorted(set(os.listdir(args.clean)) & set(os.listdir(args.degraded)))
    if not names:
        raise ConfigError("no matching image names between --clean and --degraded")
    lines = ["image,task,psnr_db,ssim"]
    for name in names:
        clean = read_pnm(os.path.join(args.clean, name))
        degraded = read_pnm(os.path.join(args.degraded, name))
        restored = restore_image(model, degraded)
        plane_r = _metric_plane(restored, args.channel)
        plane_c = _metric_plane(clean, args.channel)
        psnr_db = psnr(plane_r, plane_c, args.crop) if "psnr" in metrics else math.nan
        if "ssim" in metrics:
            gray_r = plane_r if plane_r.ndim == 2 else rgb_to_y(plane_r)
            gray_c = plane_c if plane_c.ndim == 2 else rgb_to_y(plane_c)
            score = ssim(crop_border(gray_r, args.crop), crop_border(gray_c, args.crop))
        else:
            score = math.nan
        lines.append(MetricReport(name, model.cfg.task, psnr_db, score).csv_line())
    body = "\n".join(lines) + "\n"
    if args.out:
        atomic_write_bytes(args.out, body.encode("utf-8"))
    sys.stdout.write(body)
    return 0


def _cmd_gradcheck(args) -> int:
    cfg = dart_config_from(read_config(args.config)) if args.config else TINY_CONFIG
    worst = 0.0
    for name, report in sorted(op_grad_reports(seed=0).items()):
        err = report.max_relative_error
        worst = max(worst, err)
        print(f"{name},{err:.3e}")
    block = block_grad_report(cfg, seed=0)
    worst = max(worst, block.max_relative_error)
    print(f"dart_block,{block.max_relative_error:.3e}")
    print(f"max,{worst:.3e}")
    return 0 if worst <= GRADCHECK_TOL else 1


def _cmd_bench(args) -> int:
    lengths = _parse_int_csv(args.lengths)
    modes = [m for m in args.mode.split(",") if m]
    for mode in modes:
        if mode not in ("sparse", "dense"):
            raise ConfigError(f"unknown bench mode {mode!r}")
    rng = Rng(args.seed)
    params = AttentionParams.create(args.dim, args.heads, rng)
    print("length,mode,ops,millis")
    for n in lengths:
        globals_ = tuple(range(args.globals))
        mask = build_longir_mask(n, args.window, args.dilation, globals_)
        x = Tensor(rng.normals(n * args.dim).reshape(n, args.dim))
        for mode in modes:
            kernel = longir_attention if mode == "sparse" else longir_attention_dense
            counter = MacCounter()
            start = time.perf_counter()
            kernel(x, mask, params, counter=counter)
            millis = (time.perf_counter() - start) * 1000.0
            print(f"{n},{mode},{counter.macs},{millis:.3f}")
    return 0


def _cmd_ablate(args) -> int:
    values = read_config(args.config)
    base_cfg = dart_config_from(values)
    schedule = schedule_from(values)
    seeds = _parse_int_csv(args.seeds)
    print("variant,seed,psnr_db")
    medians = {}
    for variant, cfg in ablation_variants(base_cfg).items():
        pairs = build_eval_pairs(values, cfg)
        scores = []
        for seed in seeds:
            model, _ = train_from_values(values, cfg, seed, schedule)
            score = evaluate_restoration(model, pairs)
            scores.append(score)
            print(f"{variant},{seed},{score:.6f}")
        medians[variant] = statistics.median(scores)
    for variant, med in medians.items():
        print(f"{variant},median,{med:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dartir",
        description="Desk-scale image restoration: degrade, train, eval, "
                    "gradcheck, bench, ablate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("degrade", help="add noise or resample an image")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--scale", type=float, default=None)
    p.add_argument("--mode", choices=("up", "down"), default="down")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_degrade)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="restore a directory and report metrics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clean", required=True)
    p.add_argument("--degraded", required=True)
    p.add_argument("--metric", default="psnr,ssim")
    p.add_argument("--channel", choices=("y", "rgb"), default="y")
    p.add_argument("--crop", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="central-difference gradient audit")
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("bench", help="banded vs dense attention scaling")
    p.add_argument("--lengths", default="256,512,1024,2048")
    p.add_argument("--window", type=int, default=33)
    p.add_argument("--dilation", type=int, default=1)
    p.add_argument("--globals", type=int, default=0)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--mode", default="sparse,dense")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("ablate", help="train and score the ablation variants")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UnknownKeyError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except DartError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
