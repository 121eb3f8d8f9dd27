"""Command-line entry point: ``mcnet <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; route that to the usage code
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _overrides(items: Sequence[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_model(path: str):
    from .data.checkpoint import CheckpointError, load_checkpoint

    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        model, _ = load_checkpoint(path)
    except CheckpointError as e:
        raise DataError(f"{path}: {e}") from None
    return model


def _read_source(path: str, size: int) -> np.ndarray:
    from .data.imageio import ImageFormatError, read_rgb

    if not Path(path).is_file():
        raise DataError(f"image not found: {path}")
    try:
        img = read_rgb(path)
    except ImageFormatError as e:
        raise DataError(f"{path}: {e}") from None
    if img.shape != (3, size, size):
        raise DataError(f"{path}: image is {img.shape[2]}x{img.shape[1]}, model expects {size}x{size}")
    return img


def _dataset(path: str):
    from .data.manifest import FrameDataset, ManifestError

    try:
        return FrameDataset.from_manifest(path)
    except ManifestError as e:
        raise DataError(str(e)) from None


def cmd_synth(args) -> int:
    from .data.synth import MIN_SIZE, write_dataset

    if args.size < MIN_SIZE:
        raise UsageError(f"--size must be at least {MIN_SIZE}, got {args.size}")
    if args.sequences < 1 or args.frames < 1:
        raise UsageError("--sequences and --frames must be positive")
    try:
        manifest = write_dataset(args.out, args.sequences, args.frames, args.size, args.seed)
    except OSError as e:
        raise DataError(f"cannot write dataset to {args.out}: {e}") from None
    print(f"wrote {args.sequences * args.frames} frames and {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .autodiff import NonFiniteError
    from .config import ConfigError, load_config
    from .data.checkpoint import CheckpointError
    from .data.manifest import ManifestError
    from .train import TrainingDiverged, run_training

    if args.config and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    overrides = _overrides(args.set)
    if args.out:
        overrides["data.out_dir"] = args.out
    if args.steps is not None:
        overrides["train.steps"] = str(args.steps)
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as e:
        raise UsageError(str(e)) from None
    try:
        run_training(cfg, resume=args.resume)
    except TrainingDiverged as e:
        raise NumericError(str(e)) from None
    except NonFiniteError as e:
        raise NumericError(str(e)) from None
    except (ManifestError, CheckpointError, OSError) as e:
        raise DataError(str(e)) from None
    except ValueError as e:
        raise UsageError(str(e)) from None
    return EXIT_OK


def cmd_animate(args) -> int:
    from .autodiff import Tensor
    from .data.imageio import write_ppm

    model = _load_model(args.ckpt)
    size = model.config.image_size
    source = _read_source(args.source, size)
    dataset = _dataset(args.driving_manifest)
    if dataset.frame_shape != source.shape:
        raise DataError(f"driving frames are {dataset.frame_shape}, source is {source.shape}")
    frames = np.concatenate(dataset.sequences)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for start in range(0, len(frames), args.batch):
        drv = frames[start:start + args.batch]
        src = np.broadcast_to(source, drv.shape)
        image = model.animate(Tensor(src.astype(model.dtype)), Tensor(drv.astype(model.dtype))).image.data
        for img in image:
            write_ppm(out / f"frame{n:04d}.ppm", img)
            n += 1
    print(f"wrote {n} frames to {out}")
    return EXIT_OK


def normalize_channel(ch: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant channel maps to 0.5."""
    lo, hi = float(ch.min()), float(ch.max())
    if hi - lo <= 0.0:
        return np.full(ch.shape, 0.5)
    return (ch - lo) / (hi - lo)


def tile_grid(tiles: Sequence[np.ndarray], gap: int = 1) -> np.ndarray:
    n = len(tiles)
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    h, w = tiles[0].shape
    grid = np.zeros((rows * (h + gap) - gap, cols * (w + gap) - gap))
    for i, t in enumerate(tiles):
        r, c = divmod(i, cols)
        grid[r * (h + gap):r * (h + gap) + h, c * (w + gap):c * (w + gap) + w] = t
    return grid


def memory_tiles(memory: np.ndarray, scale: int = 1) -> list[np.ndarray]:
    tiles = [normalize_channel(ch) for ch in memory]
    if scale > 1:
        tiles = [np.kron(t, np.ones((scale, scale))) for t in tiles]
    return tiles


def cmd_inspect_memory(args) -> int:
    from .autodiff import Tensor
    from .data.imageio import write_pgm

    model = _load_model(args.ckpt)
    if args.source:
        if not 1 <= args.level <= model.config.levels:
            raise UsageError(f"--level must be in 1..{model.config.levels}")
        src = _read_source(args.source, model.config.image_size)[None].astype(model.dtype)
        # source drives itself; the conditioned memory depends on the source only
        anim = model.animate(Tensor(src), Tensor(src))
        memory = anim.levels[args.level - 1].conditioned.data[0]
        tag = f"conditioned_level{args.level}"
    else:
        memory = model.memory.bank.data
        tag = "memory"
    channels = range(memory.shape[0]) if args.channels is None else args.channels
    bad = [c for c in channels if not 0 <= c < memory.shape[0]]
    if bad:
        raise UsageError(f"channel index out of range 0..{memory.shape[0] - 1}: {bad}")
    channels = list(channels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tiles = memory_tiles(memory[channels], args.scale)
    for c, t in zip(channels, tiles):
        write_pgm(out / f"{tag}_ch{c:03d}.pgm", t)
    write_pgm(out / f"{tag}_grid.pgm", tile_grid(tiles))
    print(f"wrote {len(tiles)} channel tiles to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data.manifest import ManifestError
    from .train import evaluate, summarize

    model = _load_model(args.ckpt)
    data = _dataset(args.manifest)
    if data.frame_shape != (3, model.config.image_size, model.config.image_size):
        raise DataError(f"manifest frames are {data.frame_shape}, model expects size {model.config.image_size}")
    try:
        rows = evaluate(model, data, args.mode, args.pairs, args.seed, args.batch, args.ablate_memory)
    except ManifestError as e:
        raise DataError(str(e)) from None
    fields = list(rows[0])
    if args.out:
        with open(args.out, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)
    else:
        writer = csv.DictWriter(sys.stdout, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    summary = summarize(rows)
    print("mean " + " ".join(f"{k}={v:.4f}" for k, v in summary.items()), file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .autodiff import gradcheck

    try:
        results = gradcheck.run(args.op, seed=args.seed)
    except KeyError as e:
        raise UsageError(e.args[0]) from None
    failed = 0
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} max_rel_error={r.max_rel_error:.3e}")
        failed += not r.passed
    print(f"{len(results) - failed}/{len(results)} passed")
    if failed:
        raise NumericError(f"{failed} gradient check(s) failed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mcnet", description="Memory-compensated face animation toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic face dataset and manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--sequences", type=int, default=20)
    s.add_argument("--frames", type=int, default=30)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="run the optimization loop")
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--out", help="output folder (overrides data.out_dir)")
    s.add_argument("--steps", type=int, help="overrides train.steps")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("animate", help="animate a source image with a driving sequence")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--source", required=True)
    s.add_argument("--driving-manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--batch", type=int, default=8)
    s.set_defaults(fn=cmd_animate)

    s = sub.add_parser("inspect-memory", help="dump memory channels as grayscale tiles")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--source", help="dump the memory conditioned on this image instead")
    s.add_argument("--level", type=int, default=1, help="encoder level for --source (1-based)")
    s.add_argument("--channels", type=int, nargs="+", help="subset of channel indices")
    s.add_argument("--scale", type=int, default=1, help="integer upscaling of each tile")
    s.set_defaults(fn=cmd_inspect_memory)

    s = sub.add_parser("eval", help="score animations against a manifest")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--mode", choices=("same", "cross"), default="same")
    s.add_argument("--pairs", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--batch", type=int, default=8)
    s.add_argument("--ablate-memory", action="store_true", help="zero the memory contribution")
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    s.add_argument("--op", action="append", help="restrict to this op (repeatable)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
