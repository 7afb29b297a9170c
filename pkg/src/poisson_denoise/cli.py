"""Command-line entry point, ``poisson-denoise``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
failure (a NaN or infinity reached a forward or backward pass).

Count images are exchanged as ``.npy`` files so they round-trip exactly;
any other output suffix writes an 8-bit PGM of the image divided by the peak
and clipped to ``[0, 1]``.  Set ``DENOISE_LOG=debug`` (or ``info``) for
progress logging on stderr.
"""

from __future__ import annotations

import argparse
import ctypes
import ctypes.util
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .datasets import load_directory, write_synthetic_set
from .errors import DenoiseError, FormatError, NumericError
from .evalbench import compare, emit_csv, emit_table, evaluate, layer_profile, read_eval_csv
from .imaging import load_grayscale, save_pgm, scale_to_peak
from .network import denoise, load_weights, save_weights
from .noise import CountImage, degrade, noise_stream
from .training import PRESETS, TrainConfig, fine_tune, preset, train
from .vst import anscombe_forward, anscombe_inverse_algebraic, anscombe_inverse_unbiased

log = logging.getLogger("poisson_denoise")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


def _tune_allocator():
    # Keep large temporaries on the heap instead of fresh mmaps; training
    # allocates and frees tens of megabytes per step and the page faults
    # otherwise dominate on small machines.
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c"))
        libc.mallopt(-4, 0)  # M_MMAP_MAX
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


# ---------------------------------------------------------------------------
# File helpers
# ---------------------------------------------------------------------------


def _load_counts(path, peak):
    """Read a count image: exact from ``.npy``, else an image scaled by ``peak``."""
    path = Path(path)
    if path.suffix == ".npy":
        return CountImage(np.load(path), peak)
    return CountImage(np.rint(load_grayscale(path) * peak), peak)


def _save_image(path, values, peak):
    path = Path(path)
    if path.suffix == ".npy":
        np.save(path, values)
    else:
        save_pgm(path, np.clip(np.asarray(values, dtype=np.float64) / peak, 0.0, 1.0))


def _load_array(path):
    path = Path(path)
    if path.suffix == ".npy":
        return np.asarray(np.load(path), dtype=np.float64)
    return np.rint(load_grayscale(path) * 255.0)


def _load_clean(path, peak):
    path = Path(path)
    if path.suffix == ".npy":
        return np.asarray(np.load(path), dtype=np.float64)
    return scale_to_peak(load_grayscale(path), peak)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_add_noise(args):
    field = scale_to_peak(load_grayscale(args.input), args.peak)
    counts = degrade(field, noise_stream(args.seed), peak=args.peak)
    _save_image(args.out, counts.counts, args.peak)


def _cmd_denoise(args):
    weights = load_weights(args.weights)
    peak = weights.peak if args.peak is None else args.peak
    counts = _load_counts(args.input, peak)
    est = denoise(weights, counts, peak)
    _save_image(args.out, est, peak)


def _train_config(args, peak):
    overrides = {"seed": args.seed, "threads": args.threads}
    for key in ("iterations", "batch", "patch_size", "lr"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return overrides


def _cmd_train(args):
    names, images = load_directory(args.data_dir)
    if not images:
        raise FormatError(f"no images in {args.data_dir}")
    config = preset(args.preset, args.peak, **_train_config(args, args.peak))
    validation = None
    if args.val_dir:
        validation = load_directory(args.val_dir)[1]
    log.info("training on %d images: %s", len(images), config)
    weights, history = train(images, config, validation=validation)
    save_weights(weights, args.out_weights)
    if args.history:
        history.to_csv(args.history)


def _cmd_fine_tune(args):
    base = load_weights(args.base)
    _, images = load_directory(args.class_dir)
    if not images:
        raise FormatError(f"no images in {args.class_dir}")
    tag = args.class_tag or Path(args.class_dir).name
    config = TrainConfig(peak=base.peak, net=base.config)
    overrides = _train_config(args, base.peak)
    overrides.setdefault("iterations", 45_000)
    weights = fine_tune(base, images, tag, config=replace(config, **overrides))
    save_weights(weights, args.out_weights)


def _cmd_evaluate(args):
    weights = load_weights(args.weights)
    names, images = load_directory(args.data_dir)
    report = evaluate(
        weights,
        (names, images),
        args.peak,
        realizations=args.realizations,
        seed=args.seed,
        threads=args.threads,
        method=args.method,
    )
    emit_csv(report, args.report)
    if args.table:
        emit_table([report], args.table)
    print(f"mean PSNR {report.mean:.4f} dB (noisy input {report.noisy_mean:.4f} dB)")


def _cmd_compare(args):
    report = compare(read_eval_csv(args.report_a), read_eval_csv(args.report_b))
    emit_csv(report, args.out)
    print(
        f"A wins {report.win_a:.1f}%, B wins {report.win_b:.1f}%, "
        f"zero crossing at index {report.zero_crossing}"
    )


def _cmd_introspect(args):
    weights = load_weights(args.weights)
    peak = weights.peak
    counts = _load_counts(args.input, peak)
    clean = _load_clean(args.clean, peak)
    rep = layer_profile(weights, clean, counts)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    emit_csv(rep, out / "layers.csv")
    np.save(out / "dominant.npy", rep.dominant)
    save_pgm(out / "dominant.pgm", (rep.dominant - 1) / max(weights.depth - 1, 1))
    np.save(out / "errors.npy", rep.error_images)
    for d, err in enumerate(rep.error_images):
        save_pgm(out / f"error_{d:02d}.pgm", np.clip(err / peak, 0.0, 1.0))


def _cmd_vst(args):
    x = _load_array(args.input)
    if args.mode == "forward":
        y = anscombe_forward(x)
    elif args.mode == "inverse-algebraic":
        y = anscombe_inverse_algebraic(x)
    else:
        y = anscombe_inverse_unbiased(x)
    out = Path(args.out)
    if out.suffix == ".npy":
        np.save(out, y)
    else:
        top = float(np.max(y)) if y.size else 0.0
        save_pgm(out, y / top if top > 0 else y)


def _cmd_synth(args):
    write_synthetic_set(args.out_dir, args.seed, args.count, args.size)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _peak(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"peak must be positive, got {text}")
    return value


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _add_train_overrides(p):
    p.add_argument("--iterations", type=int, help="override the iteration count")
    p.add_argument("--batch", type=_positive_int, help="override the batch size")
    p.add_argument("--patch-size", type=_positive_int, dest="patch_size", help="override the patch size")
    p.add_argument("--lr", type=float, help="override the learning rate")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="poisson-denoise", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=_positive_int, default=1, help="worker threads (default 1)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("add-noise", help="simulate Poisson counts for an image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help=".npy for exact counts, else PGM")
    p.add_argument("--peak", type=_peak, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_add_noise)

    p = sub.add_parser("denoise", help="denoise a count image")
    p.add_argument("--weights", required=True)
    p.add_argument("--in", dest="input", required=True, help=".npy counts, or an image scaled by peak")
    p.add_argument("--out", required=True)
    p.add_argument("--peak", type=_peak, help="defaults to the peak stored in the weights")
    p.set_defaults(func=_cmd_denoise)

    p = sub.add_parser("train", help="train a denoiser from scratch")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--peak", type=_peak, required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-weights", required=True)
    p.add_argument("--val-dir", help="validation images, scored periodically")
    p.add_argument("--history", help="write the loss history as CSV")
    _add_train_overrides(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("fine-tune", help="specialize a trained denoiser to one image class")
    p.add_argument("--base", required=True)
    p.add_argument("--class-dir", required=True)
    p.add_argument("--out-weights", required=True)
    p.add_argument("--class-tag", help="defaults to the class directory name")
    p.add_argument("--seed", type=int, default=0)
    _add_train_overrides(p)
    p.set_defaults(func=_cmd_fine_tune)

    p = sub.add_parser("evaluate", help="score a denoiser on a directory of images")
    p.add_argument("--weights", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--peak", type=_peak, required=True)
    p.add_argument("--realizations", type=_positive_int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.add_argument("--method", default="denoisenet")
    p.add_argument("--table", help="also write a one-row summary table")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("compare", help="paired per-image comparison of two reports")
    p.add_argument("--report-a", required=True)
    p.add_argument("--report-b", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("introspect", help="per-layer error profile and dominant-layer map")
    p.add_argument("--weights", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--clean", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_introspect)

    p = sub.add_parser("vst", help="Anscombe transform or its inverses")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--forward", dest="mode", action="store_const", const="forward")
    mode.add_argument("--inverse-algebraic", dest="mode", action="store_const", const="inverse-algebraic")
    mode.add_argument("--inverse-unbiased", dest="mode", action="store_const", const="inverse-unbiased")
    p.add_argument("--in", dest="input", required=True, help=".npy array, or an 8-bit image read as levels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_vst)

    p = sub.add_parser("synth", help="write synthetic test scenes as PGM files")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=_positive_int, default=8)
    p.add_argument("--size", type=_positive_int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)
    return parser


def _configure_logging():
    level = os.environ.get("DENOISE_LOG", "warning").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )


def run(argv=None) -> int:
    """Parse ``argv`` and run one subcommand; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    _configure_logging()
    _tune_allocator()
    try:
        args.func(args)
    except (NumericError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DenoiseError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())
