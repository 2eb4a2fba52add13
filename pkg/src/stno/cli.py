"""Command-line entry point: ``stno <command> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 numeric failure (non-finite values during training or inference).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench
from .autograd import ContractError, DimensionError, NonFiniteError, Tensor, no_grad
from .checkpoint import load_checkpoint
from .config import ConfigError, RunConfig
from .imageio import read_image, write_image
from .metrics import epe, psnr, ssim
from .model import LEVELS, STNO, upsample_flow
from .synthetic import (
    SpecError, SyntheticDataset, bicubic_resize, export_dataset, load_dataset, load_sample,
    read_manifest, write_flow,
)
from .attention import write_pgm
from .train import TrainingAborted, train_loop

log = logging.getLogger("stno")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'section.key = value' file")
    p.add_argument("--seed", type=int, help="overrides train.seed and data.seed")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stno", description="Space-time video super-resolution at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="export a synthetic dataset")
    _common(p)
    p.add_argument("--count", type=int, help="number of scenes (default data.count)")

    p = sub.add_parser("train", help="train or fine-tune a model")
    _common(p)
    p.add_argument("--mode", choices=("fixed", "continuous"))
    p.add_argument("--resume", help="checkpoint of an interrupted run to continue")
    p.add_argument("--init", help="fixed-mode checkpoint to fine-tune from (continuous mode)")
    p.add_argument("--data", help="exported dataset directory (default: generate on the fly)")

    p = sub.add_parser("infer", help="super-resolve and interpolate input frames")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("inputs", nargs="+", help="two or more input frames (PNG or PPM)")
    p.add_argument("--time", type=float, nargs="+", default=[0.5], help="intermediate times in [0, 1]")
    p.add_argument("--scale", type=float, default=4.0, help="upscaling factor in [1, 8]")
    p.add_argument("--dump-flow", action="store_true", help="write finest-level flows (output pixels)")
    p.add_argument("--dump-attention", action="store_true", help="write attention heatmaps as PGM")

    p = sub.add_parser("eval", help="score a checkpoint on an exported dataset")
    _common(p)
    p.add_argument("--data", required=True, help="exported dataset directory")
    p.add_argument("--checkpoint")
    p.add_argument("--ground-truth", action="store_true",
                   help="score the ground truth itself instead of a model (pipeline check)")
    p.add_argument("--split", choices=("all", "train", "val"), default="all")

    p = sub.add_parser("bench-attn", help="time attention kernels against token count")
    _common(p)
    p.add_argument("--n", type=int, nargs="+", help="token counts (default: per-kernel grids)")
    p.add_argument("--channels", type=int, nargs="+", default=[32])
    p.add_argument("--repeats", type=int, default=7)
    p.add_argument("--kernels", nargs="+", choices=tuple(bench.KERNELS), default=list(bench.KERNELS))
    p.add_argument("--no-memory", action="store_true", help="skip the tracemalloc pass")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["train.seed"] = overrides["data.seed"] = str(args.seed)
    if getattr(args, "mode", None):
        overrides["train.mode"] = args.mode
    return RunConfig.resolve(args.config, overrides)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    data = cfg.data
    count = args.count if args.count is not None else data.count
    if count < 1:
        raise UsageError("--count must be >= 1")
    cfg.update({"data.count": count})
    ds = SyntheticDataset(cfg.values["data.seed"], count, cfg.data)
    export_dataset(ds, out)
    cfg.echo(out)
    log.info("wrote %d samples to %s", count, out)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    tc = cfg.train
    start = args.resume or args.init
    if tc.mode == "continuous" and start is None:
        raise UsageError("continuous mode needs --init with a fixed-mode checkpoint (or --resume)")
    if start is not None:
        model, header = load_checkpoint(start)
        cfg.update({f"model.{k}": v for k, v in header["config"].items()})
    else:
        model = STNO(cfg.model, seed=tc.seed)
    dataset = load_dataset(args.data, cfg.data) if args.data else \
        SyntheticDataset(cfg.values["data.seed"], cfg.data.count, cfg.data)
    cfg.echo(out)
    metrics = train_loop(model, dataset, tc, out, resume=args.resume, log=log.info)
    if metrics:
        log.info("final validation: %s", {k: v for k, v in metrics.items() if v is not None})
    return EXIT_OK


def _flow_to_output(flow: Tensor, size: tuple, lr_size: tuple) -> np.ndarray:
    """Finest-level flow (padded low-res grid) resized to output pixels."""
    hp, wp = flow.shape[-2:]
    fy, fx = size[0] / lr_size[0], size[1] / lr_size[1]
    up = upsample_flow(flow, (int(round(hp * fy)), int(round(wp * fx)))).data
    return up[..., :size[0], :size[1]]


def cmd_infer(args, cfg: RunConfig) -> int:
    if len(args.inputs) < 2:
        raise UsageError("infer needs at least two input frames")
    for t in args.time:
        if not 0.0 <= t <= 1.0:
            raise UsageError(f"--time {t} outside [0, 1]")
    if not 1.0 <= args.scale <= 8.0:
        raise UsageError(f"--scale {args.scale} outside [1, 8]")
    frames = [read_image(p) for p in args.inputs]
    if any(f.shape != frames[0].shape for f in frames):
        raise UsageError("input frames differ in size")
    out = _out_dir(args)
    model, _ = load_checkpoint(args.checkpoint)
    model.record_attention = args.dump_attention
    with no_grad():
        res = model.forward([Tensor(f) for f in frames], args.time, args.scale)
    for i, frame in enumerate(res.frames):
        write_image(out / f"frame_{i:03d}.png", frame.data[0])
    times = sorted(args.time)
    if args.dump_flow:
        lr_size = frames[0].shape[-2:]
        size = res.frames[0].shape[-2:]
        for p, per_t in enumerate(res.flows):
            base = per_t[0][0]
            write_flow(out / f"pair{p}_flow01.flo", _flow_to_output(base.flow01, size, lr_size)[0])
            write_flow(out / f"pair{p}_flow10.flo", _flow_to_output(base.flow10, size, lr_size)[0])
            for k, levels in enumerate(per_t[:len(times)]):
                fs = levels[0]
                write_flow(out / f"pair{p}_t{k}_flow_t0.flo", _flow_to_output(fs.flow_t0, size, lr_size)[0])
                write_flow(out / f"pair{p}_t{k}_flow_t1.flo", _flow_to_output(fs.flow_t1, size, lr_size)[0])
    if args.dump_attention:
        per_pair = LEVELS * model.config.iterations
        for idx, ((level, it), img) in enumerate(model.attention_maps):
            write_pgm(out / f"attn_pair{idx // per_pair}_level{level}_iter{it}.pgm", img)
    cfg.echo(out)
    log.info("wrote %d frames to %s (times %s)", len(res.frames), out, times)
    return EXIT_OK


EVAL_COLUMNS = ("method", "sample", "frame_class", "psnr", "ssim", "epe")


def _eval_sample(model: Optional[STNO], sample) -> tuple[list, np.ndarray]:
    """Predicted ``[key0, mid, key1]`` frames and flow01 in high-res pixels."""
    hr = sample.hr_frames
    if model is None:
        return list(hr), sample.flows["flow01"]
    h, w = sample.lr_frames.shape[-2:]
    with no_grad():
        res = model.forward([Tensor(f) for f in sample.lr_frames], [sample.t], sample.scale)
    pred = [f.data[0] for f in res.frames]
    if pred[0].shape != hr[0].shape:
        raise ConfigError(f"checkpoint output {pred[0].shape} does not match data {hr[0].shape} "
                          f"at scale {sample.scale}")
    flow = _flow_to_output(res.flows[0][0][0].flow01, sample.flows["flow01"].shape[-2:], (h, w))[0]
    return pred, flow


def cmd_eval(args, cfg: RunConfig) -> int:
    if (args.checkpoint is None) == (not args.ground_truth):
        raise UsageError("eval needs exactly one of --checkpoint or --ground-truth")
    model = None if args.ground_truth else load_checkpoint(args.checkpoint)[0]
    root = Path(args.data)
    names = [n for n, split in read_manifest(root) if args.split in ("all", split)]
    if not names:
        raise UsageError(f"no samples in split {args.split!r}")
    out = _out_dir(args)
    rows = []
    for name in names:
        sample = load_sample(root / name)
        if sample.lr_frames.shape[1] != 3:
            raise ConfigError(f"{name}: expected RGB frames")
        pred, flow = _eval_sample(model, sample)
        hr = sample.hr_frames
        mask = ~sample.occlusions["flow01"]
        e = epe(flow, sample.flows["flow01"], mask)
        method = "ground_truth" if model is None else "model"
        rows.append((method, name, "key", np.mean([psnr(pred[k], hr[k]) for k in (0, 2)]),
                     np.mean([ssim(pred[k], hr[k]) for k in (0, 2)]), None))
        rows.append((method, name, "interpolated", psnr(pred[1], hr[1]), ssim(pred[1], hr[1]), e))
        size = hr.shape[-2:]
        keys = [np.clip(bicubic_resize(sample.lr_frames[k], *size), 0, 1) for k in (0, 1)]
        mid = keys[0 if sample.t <= 0.5 else 1]
        rows.append(("bicubic", name, "key", np.mean([psnr(keys[k], hr[2 * k]) for k in (0, 1)]),
                     np.mean([ssim(keys[k], hr[2 * k]) for k in (0, 1)]), None))
        rows.append(("bicubic", name, "interpolated", psnr(mid, hr[1]), ssim(mid, hr[1]), None))
    agg = []
    for method in dict.fromkeys(r[0] for r in rows):
        for cls in ("key", "interpolated"):
            sel = [r for r in rows if r[0] == method and r[2] == cls]
            epes = [r[5] for r in sel if r[5] is not None]
            agg.append((method, "mean", cls, np.mean([r[3] for r in sel]), np.mean([r[4] for r in sel]),
                        np.mean(epes) if epes else None))
    path = out / "eval.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for r in rows + agg:
            w.writerow(list(r[:3]) + ["" if v is None else f"{float(v):.6f}" for v in r[3:]])
    cfg.echo(out)
    for r in agg:
        log.info("%s %s: psnr %.3f ssim %.4f epe %s", r[0], r[2], r[3], r[4],
                 "-" if r[5] is None else f"{r[5]:.4f}")
    return EXIT_OK


def cmd_bench_attn(args, cfg: RunConfig) -> int:
    if args.repeats < bench.MIN_REPEATS:
        raise UsageError(f"--repeats must be >= {bench.MIN_REPEATS}")
    out = _out_dir(args)
    seed = cfg.train.seed
    records = []
    for kernel in args.kernels:
        grid = args.n or (bench.GALERKIN_N if kernel == "galerkin" else bench.SOFTMAX_N)
        records += bench.run_bench(kernel, grid, args.channels, args.repeats, args.threads, seed,
                                   measure_memory=not args.no_memory)
    fits = bench.fit_slope(records)
    bench.write_records(out / "bench.csv", records)
    bench.write_fits(out / "slopes.csv", fits)
    cfg.echo(out)
    for f in fits:
        flag = "  (flagged: R^2 <= %.2f)" % bench.R2_FLAG if f.flagged else ""
        print(f"{f.kernel} C={f.C}: slope {f.slope:.3f} R^2 {f.r2:.4f}{flag}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
    "bench-attn": cmd_bench_attn,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg = resolve_config(args)
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, ContractError, DimensionError, SpecError) as exc:
        print(f"stno: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, TrainingAborted) as exc:
        print(f"stno: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"stno: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
