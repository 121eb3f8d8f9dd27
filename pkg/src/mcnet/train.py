"""Optimization loop, evaluation and metrics logging."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import objectives as obj
from .autodiff import NonFiniteError, Tape, Tensor, backward, ops
from .config import LossConfig, RunConfig
from .data.checkpoint import TrainState, load_checkpoint, save_checkpoint
from .data.manifest import FrameDataset, sample_batch
from .metrics import metrics
from .model import MCNet

CSV_COLUMNS = ("step", "l1", "psnr", "ssim", "loss_total", "loss_p", "loss_eq", "loss_dist", "loss_con")
LOSS_COLUMNS = {"perceptual": "loss_p", "equivariance": "loss_eq", "distance": "loss_dist",
                "consistency": "loss_con"}


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite value at step {step}: {detail}")
        self.step = step


class Adam:
    def __init__(self, named_params: Sequence[tuple[str, Tensor]], lr: float = 2e-4,
                 betas: tuple[float, float] = (0.5, 0.999), eps: float = 1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        # bias corrections folded into the step size
        lr_t = self.lr * np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for name, p in self.params:
            g = grads[p]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = (p.data - lr_t * m / (np.sqrt(v) + self.eps)).astype(p.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.asarray(float(self.t))}
        for name, _ in self.params:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if not state:
            return
        self.t = int(state["t"])
        for name, p in self.params:
            for key, store in (("m", self.m), ("v", self.v)):
                arr = state.get(f"{key}/{name}")
                if arr is None or arr.shape != p.shape:
                    raise ValueError(f"optimizer state for {name} missing or misshapen")
                store[name] = arr.astype(p.dtype, copy=True)


def loss_weights(cfg: LossConfig) -> obj.LossWeights:
    return obj.LossWeights(cfg.lambda_p, cfg.lambda_eq, cfg.lambda_dist, cfg.lambda_con)


def consistency_levels(text: str, n_levels: int) -> list[int]:
    """Parse ``all`` or a comma list of 1-based level numbers into 0-based indices."""
    if text.strip() == "all":
        return list(range(n_levels))
    try:
        levels = sorted({int(s) - 1 for s in text.split(",") if s.strip()})
    except ValueError:
        raise ValueError(f"bad loss.con_levels {text!r}") from None
    if not levels or levels[0] < 0 or levels[-1] >= n_levels:
        raise ValueError(f"loss.con_levels {text!r} out of range 1..{n_levels}")
    return levels


@dataclass
class StepOutput:
    loss: Tensor
    parts: dict[str, Tensor]
    image: Tensor
    exact_distance: float


def compute_losses(model: MCNet, source: Tensor, driving: Tensor, loss_cfg: LossConfig,
                   extractor: obj.Extractor, transform: obj.SpatialTransform) -> StepOutput:
    anim = model.animate(source, driving)
    both = ops.concat([anim.kp_source, anim.kp_driving], axis=0)
    idx = consistency_levels(loss_cfg.con_levels, len(anim.levels))
    parts = {
        "perceptual": obj.perceptual_loss(anim.image, driving, extractor),
        "equivariance": obj.equivariance_loss(driving, model.kp_detector, transform,
                                              keypoints=anim.kp_driving),
        "distance": obj.keypoint_distance_loss(both, loss_cfg.alpha),
        "consistency": obj.consistency_loss([anim.levels[i].value_for_consistency for i in idx],
                                            [anim.levels[i].proj for i in idx]),
    }
    exact = obj.keypoint_distance_loss(both, loss_cfg.alpha, exact=True).item()
    return StepOutput(obj.total_loss(parts, loss_weights(loss_cfg)), parts, anim.image, exact)


def step_rng(seed: int, step: int) -> np.random.Generator:
    # one stream per step so resumed runs draw the same batches
    return np.random.default_rng([seed, step])


class Trainer:
    def __init__(self, cfg: RunConfig, dataset: FrameDataset, model: Optional[MCNet] = None,
                 state: Optional[TrainState] = None, extractor: Optional[obj.Extractor] = None):
        self.cfg = cfg
        self.dtype = cfg.train.dtype
        size = cfg.model.image_size
        if dataset.frame_shape != (3, size, size):
            raise ValueError(f"dataset frames are {dataset.frame_shape}, model expects (3, {size}, {size})")
        self.data = dataset
        self.model = model if model is not None else MCNet(cfg.model, dtype=self.dtype, seed=cfg.train.seed)
        self.extractor = extractor if extractor is not None else obj.RandomFeatureExtractor(dtype=self.dtype)
        self.optimizer = Adam(self.model.named_parameters(), cfg.train.lr, (cfg.train.beta1, cfg.train.beta2))
        self.step = 0
        if state is not None:
            self.step = state.step
            self.optimizer.load_state(state.moments)

    def batch(self, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
        src, drv, _ = sample_batch(self.data, "same", rng, self.cfg.train.batch)
        return Tensor(src.astype(self.dtype)), Tensor(drv.astype(self.dtype))

    def train_step(self) -> dict[str, float]:
        """One update; returns the CSV row measured before the update."""
        rng = step_rng(self.cfg.train.seed, self.step)
        source, driving = self.batch(rng)
        transform = obj.SpatialTransform.random(rng)
        params = self.model.parameters()
        try:
            with Tape() as tape:
                out = compute_losses(self.model, source, driving, self.cfg.loss, self.extractor, transform)
            grads = backward(out.loss, tape, wrt=params)
        except NonFiniteError as e:
            raise TrainingDiverged(self.step, str(e)) from None
        for p in params:
            if not np.isfinite(grads[p]).all():
                raise TrainingDiverged(self.step, "gradient")
        row = {"step": self.step, **metrics(out.image.data, driving.data),
               "loss_total": out.loss.item()}
        row.update({LOSS_COLUMNS[k]: v.item() for k, v in out.parts.items()})
        row["exact_distance"] = out.exact_distance
        self.optimizer.step(grads)
        self.step += 1
        return row

    def state(self) -> TrainState:
        return TrainState(self.step, self.optimizer.state())

    def save(self, path: str | Path) -> None:
        save_checkpoint(self.model, path, self.state())


def format_row(row: dict[str, float]) -> list[str]:
    return [str(int(row["step"]))] + [repr(float(row[c])) for c in CSV_COLUMNS[1:]]


def checkpoint_path(out_dir: Path, step: int) -> Path:
    return out_dir / f"ckpt_{step:06d}.mcnc"


def run_training(cfg: RunConfig, resume: Optional[str | Path] = None,
                 log: Callable[[str], None] = print) -> dict[str, float]:
    """Train for ``cfg.train.steps`` further steps and write outputs to ``cfg.data.out_dir``.

    Files: ``config.txt``, ``metrics.csv`` (one row per step),
    ``ckpt_NNNNNN.mcnc`` every ``ckpt_every`` steps and ``last.mcnc``.
    With ``steps=0`` only the initial checkpoint is written.
    """
    if not cfg.data.manifest:
        raise ValueError("data.manifest is not set")
    dataset = FrameDataset.from_manifest(cfg.data.manifest)
    model = state = None
    if resume is not None:
        model, state = load_checkpoint(resume, dtype=cfg.train.dtype)
        cfg.model = model.config
    trainer = Trainer(cfg, dataset, model, state)
    out = Path(cfg.data.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.train.steps == 0:
        trainer.save(checkpoint_path(out, trainer.step))
        log(f"wrote initial checkpoint at step {trainer.step}")
        return {}
    (out / "config.txt").write_text(cfg.to_text())
    csv_path = out / "metrics.csv"
    if resume is None or not csv_path.exists():
        with csv_path.open("w", newline="") as f:
            csv.writer(f).writerow(CSV_COLUMNS)
        if resume is None:
            trainer.save(checkpoint_path(out, 0))
    last: dict[str, float] = {}
    first: Optional[dict[str, float]] = None
    end = trainer.step + cfg.train.steps
    with csv_path.open("a", newline="") as f:
        writer = csv.writer(f)
        while trainer.step < end:
            row = trainer.train_step()
            writer.writerow(format_row(row))
            f.flush()
            first = first or row
            last = row
            step = trainer.step
            if cfg.train.log_every and (step % cfg.train.log_every == 0 or step == end):
                log(f"step {row['step']:6d} loss {row['loss_total']:.4f} l1 {row['l1']:.4f} "
                    f"psnr {row['psnr']:.2f} ssim {row['ssim']:.4f} dist(exact) {row['exact_distance']:.1f}")
            if cfg.train.ckpt_every and step % cfg.train.ckpt_every == 0:
                trainer.save(checkpoint_path(out, step))
    trainer.save(out / "last.mcnc")
    summary = {"steps": trainer.step, "first_loss": first["loss_total"], "final_loss": last["loss_total"],
               "l1": last["l1"], "psnr": last["psnr"], "ssim": last["ssim"]}
    log("final: " + " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items()))
    return summary


def evaluate(model: MCNet, dataset: FrameDataset, mode: str = "same", pairs: int = 64, seed: int = 0,
             batch: int = 8, ablate_memory: bool = False) -> list[dict[str, float]]:
    """Animate ``pairs`` sampled pairs; same mode scores against the driving frame.

    Cross mode has no ground truth, so rows hold generation statistics only
    (mean intensity and the L1 distance to the source image).
    """
    rng = np.random.default_rng(seed)
    dtype = model.dtype
    rows = []
    done = 0
    while done < pairs:
        n = min(batch, pairs - done)
        src, drv, meta = sample_batch(dataset, mode, rng, n)
        image = model.animate(Tensor(src.astype(dtype)), Tensor(drv.astype(dtype)),
                              ablate_memory=ablate_memory).image.data
        for k in range(n):
            row = {"pair": done + k, "source": "%d:%d" % meta[k].source_id,
                   "driving": "%d:%d" % meta[k].driving_id}
            if mode == "same":
                row.update(metrics(image[k], drv[k]))
            else:
                row.update({"mean": float(image[k].mean()), "l1_to_source": float(np.abs(image[k] - src[k]).mean())})
            rows.append(row)
        done += n
    return rows


def summarize(rows: list[dict]) -> dict[str, float]:
    keys = [k for k in rows[0] if isinstance(rows[0][k], float)]
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}
