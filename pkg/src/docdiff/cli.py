"""docdiff command line: synth, train, enhance, eval, schedule.

Exit codes: 0 success, 2 usage or I/O problem, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data, metrics
from .inference import enhance, refine_external
from .schedule import linear_schedule
from .trainer import (
    NonFiniteLossError,
    TrainConfig,
    load_checkpoint,
    new_training_state,
    train,
)

log = logging.getLogger("docdiff")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
METRICS = ("psnr", "ssim", "fm", "pfm")


class UsageError(Exception):
    """Bad flags, missing files, unreadable inputs: exit code 2."""


def default_seed() -> int:
    raw = os.environ.get("DOCDIFF_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"DOCDIFF_SEED must be an integer, got {raw!r}") from None


def read_config_file(path) -> dict[str, str]:
    """`key = value` lines; `#` starts a comment."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        values[key.strip()] = value.strip()
    return values


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    if args.count < 0 or args.size < 32:
        raise UsageError("--count must be >= 0 and --size >= 32")
    try:
        out = data.write_corpus(args.out, args.count, args.kind, args.size, args.seed, args.split)
    except OSError as exc:
        raise UsageError(f"cannot write corpus to {args.out}: {exc}") from None
    log.info("wrote %d %s pairs to %s", args.count, args.kind, out)
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    values = read_config_file(args.config) if args.config else {}
    values.setdefault("seed", str(args.seed))
    if args.iters is not None:
        values["iters"] = str(args.iters)
    if args.detach_target:
        values["detach_target"] = "true"
    if args.predict_eps:
        values["predict_eps"] = "true"
    if args.no_freqsep:
        values["freqsep"] = "false"
    try:
        return TrainConfig.from_mapping(values)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from None


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    if (data_dir / "train").is_dir():
        data_dir = data_dir / "train"
    try:
        corpus = data.load_corpus(data_dir)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load training data: {exc}") from None
    if not corpus:
        raise UsageError(f"no training pairs found in {data_dir}")
    if args.resume:
        try:
            state = load_checkpoint(args.resume)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot resume from {args.resume}: {exc}") from None
        if args.iters is not None:
            state.config.iters = args.iters
    else:
        state = new_training_state(_train_config(args))
    for line in state.config.to_lines():
        log.info("config %s", line)
    log_path = args.log or str(Path(args.out).with_suffix(".csv"))
    try:
        train(state, corpus, log_path=log_path, checkpoint_path=args.out)
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"docdiff train: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        raise UsageError(f"cannot write training outputs: {exc}") from None
    return EXIT_OK


def cmd_enhance(args) -> int:
    try:
        state = load_checkpoint(args.ckpt)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"bad checkpoint {args.ckpt}: {exc}") from None
    try:
        img = data.load_image(args.inp)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read {args.inp}: {exc}") from None
    bundle = state.bundle
    bundle.use_ema = not args.no_ema
    if img.shape[0] != bundle.cp_config.in_channels:
        raise UsageError(f"model expects {bundle.cp_config.in_channels}-channel images, "
                         f"{args.inp} has {img.shape[0]}")
    if not 1 <= args.steps <= bundle.schedule.T:
        raise UsageError(f"--steps must lie in [1, {bundle.schedule.T}]")
    run = refine_external if args.refine_only else enhance
    out = run(bundle, img, steps=args.steps, mode=args.mode, seed=args.seed)
    if not np.all(np.isfinite(out)):
        print("docdiff enhance: non-finite output", file=sys.stderr)
        return EXIT_NUMERIC
    try:
        data.save_image(out, args.out)
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc}") from None
    return EXIT_OK


def _image_files(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise UsageError(f"{directory} is not a directory")
    return {p.name: p for p in sorted(directory.iterdir())
            if p.suffix.lower() in (".pgm", ".ppm", ".pnm")}


def evaluate_pair(pred: np.ndarray, gt: np.ndarray, names, threshold) -> dict[str, float]:
    row = {}
    if "psnr" in names:
        row["psnr"] = metrics.psnr(pred, gt)
    if "ssim" in names:
        row["ssim"] = metrics.ssim(pred, gt)
    if "fm" in names or "pfm" in names:
        pb = metrics.binarize(pred, threshold)
        gb = metrics.binarize(gt, 0.5)
        if "fm" in names:
            row["fm"] = metrics.f_measure(pb, gb)[0]
        if "pfm" in names:
            row["pfm"] = metrics.pseudo_f_measure(pb, gb)
    return row


def cmd_eval(args) -> int:
    names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in names if m not in METRICS]
    if unknown or not names:
        raise UsageError(f"unknown metrics {unknown}; choose from {','.join(METRICS)}")
    names = [m for m in METRICS if m in names]
    preds, gts = _image_files(Path(args.pred)), _image_files(Path(args.gt))
    for name in preds:
        if name not in gts:
            raise UsageError(f"no ground truth for {name} in {args.gt}")
    if not preds:
        raise UsageError("no prediction images to evaluate")
    threshold = None if args.threshold == "otsu" else float(args.threshold)
    rows = []
    for name, path in preds.items():
        try:
            pred, gt = data.load_image(path), data.load_image(gts[name])
            rows.append((name, evaluate_pair(pred, gt, names, threshold)))
        except ValueError as exc:
            raise UsageError(f"{name}: {exc}") from None
    out = sys.stdout
    out.write(",".join(["file"] + names) + "\n")
    for name, row in rows:
        out.write(",".join([name] + [f"{row[m]:.6f}" for m in names]) + "\n")
    means = {m: float(np.mean([r[m] for _, r in rows])) for m in names}
    out.write(",".join(["mean"] + [f"{means[m]:.6f}" for m in names]) + "\n")
    return EXIT_OK


def cmd_schedule(args) -> int:
    try:
        s = linear_schedule(args.T, args.beta_start, args.beta_end)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.dump:
        out = sys.stdout
        out.write("t,beta,alpha,alpha_bar\n")
        for t in range(s.T + 1):
            out.write(f"{t},{float(s.beta[t])!r},{float(s.alpha[t])!r},{float(s.alpha_bar[t])!r}\n")
    else:
        print(f"T={s.T} alpha_bar[T]={float(s.alpha_bar[-1])!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="docdiff", description="Residual-diffusion document enhancement.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic paired corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--kind", choices=["blur", "denoise", "watermark", "seal"], default="blur")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train both nets jointly")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="CSV loss log (default: checkpoint path with .csv)")
    p.add_argument("--resume")
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--detach-target", action="store_true")
    p.add_argument("--predict-eps", action="store_true")
    p.add_argument("--no-freqsep", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance one PGM/PPM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--mode", choices=["native", "full"], default="full")
    p.add_argument("--refine-only", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-ema", action="store_true")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="score predictions against ground truth (CSV)")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--metrics", default="psnr,ssim,fm,pfm")
    p.add_argument("--threshold", default="0.5", help="binarization threshold or 'otsu'")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("schedule", help="inspect the noise schedule")
    p.add_argument("--T", type=int, default=100)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.02)
    p.add_argument("--dump", action="store_true")
    p.set_defaults(func=cmd_schedule)
    return parser


def _configure_logging(verbose: bool) -> None:
    # a handler of our own, bound to the current stderr, so repeated in-process
    # calls neither stack handlers nor depend on the root logger's setup
    for h in [h for h in log.handlers if getattr(h, "_docdiff", False)]:
        log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler._docdiff = True
    log.addHandler(handler)
    log.setLevel(logging.INFO if verbose else logging.WARNING)
    log.propagate = False


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _configure_logging(args.verbose)
        if getattr(args, "seed", 0) is None:
            args.seed = default_seed()
        return args.func(args)
    except UsageError as exc:
        print(f"docdiff: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
