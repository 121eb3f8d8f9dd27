"""Desk-profile training run used by the acceptance tests.

Generates the synthetic training set, trains with the desk profile, then
stores a parameters-only checkpoint, the metrics CSV and a JSON summary
(timing plus held-out scores with and without the memory read) in ``--out``.

    python scripts/desk_run.py --out artifacts/desk
"""

import argparse
import json
import shutil
import tempfile
import time
from pathlib import Path

import numpy as np

from mcnet.config import desk_config
from mcnet.data import FrameDataset, load_checkpoint, save_checkpoint, write_dataset
from mcnet.train import evaluate, run_training, summarize

TRAIN_SEED = 0
HELDOUT_SEED = 99
HELDOUT_SEQUENCES = 6
FRAMES = 30
SIZE = 64
EVAL_PAIRS = 96
EVAL_SEED = 0
# the final loss is the mean over this many trailing steps, since single-batch losses are noisy
FINAL_WINDOW = 100


def heldout_dataset(root) -> Path:
    return write_dataset(Path(root) / "heldout", sequences=HELDOUT_SEQUENCES, frames=FRAMES, size=SIZE,
                         seed=HELDOUT_SEED)


def final_loss(rows) -> float:
    return float(np.mean([float(r["loss_total"]) for r in rows[-FINAL_WINDOW:]]))


def main(argv=None) -> dict:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="artifacts/desk")
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        manifest = write_dataset(tmp / "train", sequences=20, frames=FRAMES, size=SIZE, seed=TRAIN_SEED)
        overrides = dict(item.split("=", 1) for item in args.set)
        cfg = desk_config(**{k.replace(".", "__"): v for k, v in overrides.items()},
                          data__manifest=str(manifest), data__out_dir=str(tmp / "run"),
                          train__steps=str(args.steps), train__log_every="50", train__ckpt_every="0")
        start = time.time()
        run_training(cfg)
        seconds = time.time() - start

        model, _ = load_checkpoint(tmp / "run" / "last.mcnc")
        save_checkpoint(model, out / "model.mcnc")
        shutil.copy(tmp / "run" / "metrics.csv", out / "metrics.csv")
        shutil.copy(tmp / "run" / "config.txt", out / "config.txt")

        heldout = FrameDataset.from_manifest(heldout_dataset(tmp))
        full = summarize(evaluate(model, heldout, "same", EVAL_PAIRS, EVAL_SEED))
        ablated = summarize(evaluate(model, heldout, "same", EVAL_PAIRS, EVAL_SEED, ablate_memory=True))

    summary = {"steps": args.steps, "train_seconds": seconds, "heldout": full, "heldout_ablated": ablated}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    return summary


if __name__ == "__main__":
    main()
