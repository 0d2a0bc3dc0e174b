"""Command-line entry point: ``cinformer <command> ...``.

Exit codes: 0 success, 1 usage, 2 data/format/config error, 3 numeric failure
(including a failing gradient check).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import CINFormerError, ConfigError, DataError, FormatError, NumericError, UsageError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path):
    from .config import Config
    return Config.load(path) if path else Config()


# commands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    from .data import generate_dataset
    try:
        path = generate_dataset(args.out, count=args.count, size=args.size,
                                contrast=args.contrast, seed=args.seed)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {args.out}: {exc}") from None
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import load_split
    from .train import train_loop
    config = _load_config(args.config)
    if args.seed is not None:
        config.train.seed = args.seed
    data_dir = args.data or config.data.dir
    if not data_dir:
        raise UsageError("no dataset: pass --data or set data.dir in the config")
    config.data.dir = str(data_dir)
    images, masks, _ = load_split(data_dir, "train", config.model.num_classes)
    eval_images, eval_masks, _ = load_split(data_dir, "test", config.model.num_classes)
    _check_size(images, config)
    result = train_loop(config, images, masks, args.out, eval_images, eval_masks,
                        resume=args.resume, stop_after=args.stop_after)
    print(json.dumps({"best_miou": result["best_miou"], "out": str(args.out)}, sort_keys=True))
    return EXIT_OK


def _check_size(images, config):
    side = images.shape[-1] if len(images) else config.model.input_size
    if side != config.model.input_size:
        raise DataError(f"dataset images are {side}x{side} but the model expects "
                        f"input_size={config.model.input_size}")


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_split
    from .train import evaluate
    params, _, config, _ = load_checkpoint(args.checkpoint)
    images, masks, _ = load_split(args.data, args.split, config.model.num_classes)
    _check_size(images, config)
    if not len(images):
        raise DataError(f"split {args.split!r} is empty")
    report = evaluate(params, config, images, masks)
    print(json.dumps(report.to_json(), sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_gradcheck
    results = run_gradcheck(eps=args.eps, tol=args.tolerance, corrupt=args.corrupt_op)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_bench(args) -> int:
    from .profile import bench
    config = _load_config(args.config)
    rows = bench(config)
    print(f"{'kind':<18} {'params':>10} {'attn FLOPs (st3-4)':>19} {'total FLOPs':>13}")
    for r in rows:
        print(f"{r['kind']:<18} {r['params']:>10d} {r['attention_flops']:>19d} {r['total_flops']:>13d}")
    print(json.dumps(rows, sort_keys=True))
    return EXIT_OK


def normalize_map(a: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255 bytes; an all-equal map becomes 128."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if not np.isfinite(lo) or not np.isfinite(hi):
        raise NumericError("feature map holds non-finite values")
    if hi == lo:
        return np.full(a.shape, 128, dtype=np.uint8)
    return np.rint((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def dump_features(params, config, image: np.ndarray, stages, out_dir) -> list[Path]:
    """Write mean-over-channels maps (and Top-K selection masks) for the given stages."""
    from .data import image_to_input, write_pgm
    from .model import forward
    from .autodiff import no_grad

    if image.shape != (config.model.input_size,) * 2:
        raise DataError(f"image is {image.shape[1]}x{image.shape[0]} but the model expects "
                        f"input_size={config.model.input_size}")
    trace: dict = {}
    with no_grad():
        forward(params, image_to_input(image)[None], config, trace=trace)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i in stages:
        tm = trace[f"encoder.stage{i}"]
        fmap = tm.values.data[0].mean(axis=-1).reshape(tm.h, tm.w)
        path = out / f"stage{i}_mean.pgm"
        write_pgm(path, normalize_map(fmap))
        written.append(path)
        if config.model.attention.kinds[i - 1] == "topk":
            # selection of the last block in the stage
            last = config.model.stage_depths[i - 1] - 1
            sel = trace[f"encoder.stage{i}.block{last}.attn"]["selection"]
            grid = np.zeros(tm.h * tm.w, dtype=np.uint8)
            grid[sel.token_indexes[0]] = 255
            path = out / f"stage{i}_selection.pgm"
            write_pgm(path, grid.reshape(tm.h, tm.w))
            written.append(path)
    return written


def cmd_dump_features(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import read_pgm
    params, _, config, _ = load_checkpoint(args.checkpoint)
    stages = [args.stage] if args.stage else [1, 2, 3, 4]
    for path in dump_features(params, config, read_pgm(args.image), stages, args.out):
        print(path)
    return EXIT_OK


# parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="cinformer", description="CNN-injected transformer for defect segmentation",
                formatter_class=fmt)
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic defect dataset", formatter_class=fmt)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--count", type=int, default=64, help="number of images")
    s.add_argument("--size", type=int, default=64, help="image side (multiple of 32)")
    s.add_argument("--contrast", type=float, default=0.6, help="defect contrast in (0, 1]")
    s.add_argument("--seed", type=int, default=0, help="generator seed")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model", formatter_class=fmt)
    s.add_argument("--config", default=None, help="JSON config (built-in defaults when omitted)")
    s.add_argument("--data", default=None, help="dataset directory (overrides data.dir)")
    s.add_argument("--out", required=True, help="directory for checkpoints and metrics.jsonl")
    s.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    s.add_argument("--resume", default=None, help="checkpoint to resume from")
    s.add_argument("--stop-after", type=int, default=None,
                   help="stop after this many total steps (schedule unchanged)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint; prints JSON", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True, help="checkpoint path")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--split", default="test", help="manifest split (train, test or all)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite", formatter_class=fmt)
    s.add_argument("--eps", type=float, default=1e-3, help="central-difference step")
    s.add_argument("--tolerance", type=float, default=1e-4, help="max relative error")
    s.add_argument("--corrupt-op", default=None, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", help="params/FLOPs per attention kind", formatter_class=fmt)
    s.add_argument("--config", default=None, help="JSON config (built-in defaults when omitted)")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("dump-features", help="write stage activation maps as PGM",
                       formatter_class=fmt)
    s.add_argument("--checkpoint", required=True, help="checkpoint path")
    s.add_argument("--image", required=True, help="input PGM")
    s.add_argument("--stage", type=int, choices=[1, 2, 3, 4], default=None,
                   help="encoder stage (all stages when omitted)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_dump_features)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cinformer: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DataError, FormatError) as exc:
        print(f"cinformer: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"cinformer: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CINFormerError as exc:
        print(f"cinformer: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"cinformer: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
