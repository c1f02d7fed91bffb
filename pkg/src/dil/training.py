"""Adam optimization, dataset splitting, training with best-validation
checkpointing, and metric evaluation runs.

Training masks are resampled every epoch (stream keyed by epoch and
sample index); validation and test masks are fixed per sample, so
numbers stay comparable across models and runs.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dil.dataio import Sample
from dil.masking import MaskSpec, apply_mask, gen_mask
from dil.metrics import MetricReport, lpips_distance, psnr, ssd, ssim
from dil.models import Model, save_model
from dil.tensor import Tensor, backward, clear_tape, mul, no_grad, sub, tmean, zero_grad

log = logging.getLogger("dil")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.0  # 1e-5 for the square-mask experiment
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 100
    batch_size: int = 4
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    split_seed: int = 0
    mask_spec: MaskSpec = field(default_factory=MaskSpec)

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 for f in fracs):
            raise ValueError(f"split fractions must be positive, got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)}")
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning_rate, epochs and batch_size must be positive")


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params, state: AdamState, cfg: TrainConfig) -> None:
    """One Adam update with bias correction; weight decay is decoupled
    (applied to the parameter before the moment update, scaled by lr)."""
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, p in params:
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if cfg.weight_decay > 0.0:
            p.data -= cfg.learning_rate * cfg.weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)


def split_dataset(n_samples: int, fractions: tuple[float, float, float],
                  seed: int) -> tuple[list[int], list[int], list[int]]:
    """Disjoint, covering, seed-deterministic index split; val/test sizes
    are the rounded fractions, the remainder goes to train."""
    if n_samples < 3:
        raise ValueError(f"need at least 3 samples to split, got {n_samples}")
    train_frac, val_frac, test_frac = fractions
    if abs(train_frac + val_frac + test_frac - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    n_val = int(np.floor(val_frac * n_samples + 0.5))
    n_test = int(np.floor(test_frac * n_samples + 0.5))
    n_train = n_samples - n_val - n_test
    if n_train < 1:
        raise ValueError(f"split of {n_samples} leaves no training samples")
    perm = np.random.default_rng([seed, 0x51]).permutation(n_samples)
    train = [int(i) for i in perm[:n_train]]
    val = [int(i) for i in perm[n_train : n_train + n_val]]
    test = [int(i) for i in perm[n_train + n_val :]]
    return train, val, test


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    d = sub(pred, target)
    return tmean(mul(d, d))


def _masked_batch(samples: list[Sample], idxs: list[int], spec: MaskSpec,
                  mask_index_of) -> tuple[Tensor, Tensor, Tensor]:
    rgbs, depths, gts = [], [], []
    for i in idxs:
        s = samples[i]
        h, w = s.rgb.shape[1:]
        mask = gen_mask(spec, h, w, mask_index_of(i))
        rgb_m, depth_m = apply_mask(s.rgb, s.depth, mask, spec.fill_value)
        rgbs.append(rgb_m)
        depths.append(depth_m)
        gts.append(s.rgb)
    return (
        Tensor(np.stack(rgbs)),
        Tensor(np.stack(depths)),
        Tensor(np.stack(gts)),
    )


@dataclass
class EpochStats:
    epoch: int
    train_mse: float
    val_mse: float
    wall_seconds: float


@dataclass
class TrainResult:
    history: list[EpochStats]
    best_checkpoint: Path
    best_epoch: int
    best_val_mse: float
    splits: tuple[list[int], list[int], list[int]]


def write_history(path, history: list[EpochStats]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_mse", "val_mse", "wall_seconds"])
        for row in history:
            writer.writerow([row.epoch, repr(row.train_mse), repr(row.val_mse),
                             f"{row.wall_seconds:.3f}"])


def _val_mse(model: Model, samples: list[Sample], idxs: list[int],
             spec: MaskSpec, chunk: int = 8) -> float:
    total = 0.0
    for start in range(0, len(idxs), chunk):
        part = idxs[start : start + chunk]
        rgb_m, depth_m, gt = _masked_batch(samples, part, spec, lambda i: i)
        with no_grad():
            out = model.forward(rgb_m, depth_m, training=False).data
        d = out.astype(np.float64) - gt.data.astype(np.float64)
        total += float((d * d).mean(axis=(1, 2, 3)).sum())
    return total / len(idxs)


def train(model: Model, samples: list[Sample], cfg: TrainConfig,
          out_dir) -> TrainResult:
    """Optimize the model; keeps the checkpoint with the best validation
    loss under ``out_dir`` and logs a history row per epoch."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_idx, val_idx, test_idx = split_dataset(
        len(samples), (cfg.train_frac, cfg.val_frac, cfg.test_frac), cfg.split_seed)
    if not train_idx or not val_idx:
        raise ValueError(
            f"empty split: train={len(train_idx)} val={len(val_idx)}; "
            f"need more samples or different fractions"
        )

    params = list(model.named_parameters())
    state = AdamState()
    n = len(samples)
    history: list[EpochStats] = []
    best_val = np.inf
    best_epoch = -1
    best_path = out_dir / "best.ckpt"
    t0 = time.monotonic()

    for epoch in range(cfg.epochs):
        order = list(np.random.default_rng([cfg.split_seed, 0x5F, epoch]).permutation(train_idx))
        epoch_losses: list[tuple[int, float]] = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            clear_tape()
            rgb_m, depth_m, gt = _masked_batch(
                samples, batch, cfg.mask_spec,
                mask_index_of=lambda i, e=epoch: (e + 1) * n + i)
            out = model.forward(rgb_m, depth_m, training=True)
            loss = mse_loss(out, gt)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch} step "
                    f"{state.step + 1} (samples {batch})"
                )
            zero_grad([p for _, p in params])
            backward(loss)
            adam_step(params, state, cfg)
            epoch_losses.append((len(batch), loss_val))

        train_mse = sum(k * v for k, v in epoch_losses) / sum(k for k, _ in epoch_losses)
        val_mse = _val_mse(model, samples, val_idx, cfg.mask_spec)
        history.append(EpochStats(epoch, train_mse, val_mse, time.monotonic() - t0))
        if val_mse < best_val:
            best_val = val_mse
            best_epoch = epoch
            save_model(model, best_path)
        write_history(out_dir / "history.csv", history)
        log.info("epoch %d train_mse %.6f val_mse %.6f", epoch, train_mse, val_mse)

    return TrainResult(history, best_path, best_epoch, best_val,
                       (train_idx, val_idx, test_idx))


# ---------------------------------------------------------------------------
# Evaluation


class EncoderFeatureExtractor:
    """Per-level encoder activations of a trained model, used as the
    feature backbone of the perceptual distance."""

    def __init__(self, model: Model):
        self.model = model

    def __call__(self, img: np.ndarray) -> list[np.ndarray]:
        with no_grad():
            self.model.set_training(False)
            skips, _ = self.model.rgb_encoder.encode(
                Tensor(np.ascontiguousarray(img[None], dtype=np.float32)))
        return [s.data[0] for s in skips]


def evaluate(predict, samples: list[Sample], mask_spec: MaskSpec,
             feature_extractor, mask_indices: list[int] | None = None,
             jobs: int = 1) -> MetricReport:
    """Score a predictor on fixed per-sample masks.

    ``predict(rgb_masked, depth_masked) -> inpainted`` works on single
    (C,H,W) arrays. Metrics are computed for both the inpainted and the
    masked image against the ground truth; the report carries the
    inpainted-to-masked ratio per metric.
    """
    if not samples:
        raise ValueError("evaluate: empty test split")
    if mask_indices is None:
        mask_indices = list(range(len(samples)))
    if len(mask_indices) != len(samples):
        raise ValueError("evaluate: one mask index per sample required")

    def one(pair):
        s, mi = pair
        h, w = s.rgb.shape[1:]
        mask = gen_mask(mask_spec, h, w, mi)
        rgb_m, depth_m = apply_mask(s.rgb, s.depth, mask, mask_spec.fill_value)
        inpainted = np.asarray(predict(rgb_m, depth_m), dtype=np.float32)
        if inpainted.shape != s.rgb.shape:
            raise ValueError(
                f"{s.id}: predictor returned {inpainted.shape}, expected {s.rgb.shape}"
            )
        gt = s.rgb
        feats_gt = feature_extractor(gt)
        vals_in = {
            "ssd": ssd(inpainted, gt),
            "psnr": psnr(inpainted, gt),
            "ssim": ssim(inpainted, gt),
            "lpips": lpips_distance(feature_extractor(inpainted), feats_gt),
        }
        vals_mask = {
            "ssd": ssd(rgb_m, gt),
            "psnr": psnr(rgb_m, gt),
            "ssim": ssim(rgb_m, gt),
            "lpips": lpips_distance(feature_extractor(rgb_m), feats_gt),
        }
        return s.id, vals_in, vals_mask

    pairs = list(zip(samples, mask_indices))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = [one(p) for p in pairs]

    report = MetricReport()
    for sid, vals_in, vals_mask in results:
        report.add_sample(sid, vals_in, vals_mask)
    return report
