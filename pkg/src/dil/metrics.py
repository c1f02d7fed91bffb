"""Reconstruction quality metrics and their ratio aggregation.

All metrics compare an image against the ground truth and are computed in
float64. The headline number for a model is, per metric, the ratio of the
metric summed over (inpainted, truth) pairs to the same sum over
(masked, truth) pairs — a ratio of sums, not a mean of per-sample ratios.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

METRIC_NAMES = ("ssd", "psnr", "ssim", "lpips")

# PSNR is singular for identical images; the MSE clamp caps it at 120 dB
# so ratio aggregation stays total.
PSNR_MSE_CLAMP = 1e-12
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _check_pair(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def ssd(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of squared pixel differences over all channels and positions."""
    _check_pair(a, b, "ssd")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float((d * d).sum())


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """10*log10(max^2 / MSE) in decibels, capped at 120 dB for identical
    images via the MSE clamp."""
    _check_pair(a, b, "psnr")
    mse = ssd(a, b) / a.size
    mse = max(mse, PSNR_MSE_CLAMP)
    return float(10.0 * np.log10(max_val * max_val / mse))


def _gaussian_window() -> np.ndarray:
    half = (SSIM_WINDOW - 1) / 2
    g = np.exp(-((np.arange(SSIM_WINDOW) - half) ** 2) / (2 * SSIM_SIGMA**2))
    w = np.outer(g, g)
    return w / w.sum()


_WINDOW = _gaussian_window()


def _windowed_mean(x: np.ndarray) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW))
    return np.einsum("ijkl,kl->ij", win, _WINDOW, optimize=True)


def ssim(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """Mean structural similarity over 11x11 Gaussian windows (sigma 1.5),
    valid region only, on the grayscale (channel-mean) images."""
    _check_pair(a, b, "ssim")
    if a.ndim == 3:
        ga = a.astype(np.float64).mean(axis=0)
        gb = b.astype(np.float64).mean(axis=0)
    elif a.ndim == 2:
        ga = a.astype(np.float64)
        gb = b.astype(np.float64)
    else:
        raise ValueError(f"ssim expects (C,H,W) or (H,W), got {a.shape}")
    h, w = ga.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")

    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    mu_a = _windowed_mean(ga)
    mu_b = _windowed_mean(gb)
    var_a = _windowed_mean(ga * ga) - mu_a * mu_a
    var_b = _windowed_mean(gb * gb) - mu_b * mu_b
    cov = _windowed_mean(ga * gb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def normalize_channels(feat: np.ndarray, eps: float = 1e-10) -> np.ndarray:
    """Scale each spatial location's channel vector to unit L2 norm."""
    feat = feat.astype(np.float64)
    norm = np.sqrt((feat * feat).sum(axis=0, keepdims=True))
    return feat / (norm + eps)


def lpips_distance(feats_a: list[np.ndarray], feats_b: list[np.ndarray],
                   weights: list[np.ndarray] | None = None) -> float:
    """Perceptual distance over per-layer feature maps.

    Features are channel-unit-normalized per location, optionally scaled
    by per-channel weights, then the squared differences are averaged over
    positions and summed over layers. The feature extractor is injected by
    the caller (by default the trained plain model's encoder elsewhere in
    this package); uniform weights are used when none are given.
    """
    if len(feats_a) != len(feats_b):
        raise ValueError(f"layer count mismatch: {len(feats_a)} vs {len(feats_b)}")
    if weights is None:
        weights = [np.ones(f.shape[0]) for f in feats_a]
    if len(weights) != len(feats_a):
        raise ValueError(f"weight count mismatch: {len(weights)} vs {len(feats_a)}")
    total = 0.0
    for layer, (fa, fb, w) in enumerate(zip(feats_a, feats_b, weights)):
        if fa.shape != fb.shape:
            raise ValueError(f"layer {layer}: shape mismatch {fa.shape} vs {fb.shape}")
        if w.shape != (fa.shape[0],):
            raise ValueError(f"layer {layer}: weights {w.shape} != channels {fa.shape[0]}")
        d = w[:, None, None] * (normalize_channels(fa) - normalize_channels(fb))
        hw = fa.shape[1] * fa.shape[2]
        total += float((d * d).sum()) / hw
    return total


def metric_ratio(inpainted_vals: list[float], masked_vals: list[float]) -> float:
    """Ratio of sums: sum over inpainted values / sum over masked values."""
    if len(inpainted_vals) != len(masked_vals):
        raise ValueError(
            f"length mismatch: {len(inpainted_vals)} vs {len(masked_vals)}"
        )
    if not inpainted_vals:
        raise ValueError("metric_ratio of empty lists")
    denom = float(sum(masked_vals))
    if denom == 0.0:
        raise ValueError("metric_ratio denominator is zero")
    return float(sum(inpainted_vals)) / denom


@dataclass
class MetricReport:
    """Per-sample metric values plus the aggregate ratios."""

    sample_ids: list[str] = field(default_factory=list)
    inpainted: dict[str, list[float]] = field(
        default_factory=lambda: {m: [] for m in METRIC_NAMES})
    masked: dict[str, list[float]] = field(
        default_factory=lambda: {m: [] for m in METRIC_NAMES})

    def add_sample(self, sample_id: str, inpainted_vals: dict[str, float],
                   masked_vals: dict[str, float]) -> None:
        self.sample_ids.append(sample_id)
        for m in METRIC_NAMES:
            self.inpainted[m].append(inpainted_vals[m])
            self.masked[m].append(masked_vals[m])

    @property
    def count(self) -> int:
        return len(self.sample_ids)

    def ratio(self, metric: str) -> float:
        return metric_ratio(self.inpainted[metric], self.masked[metric])

    def ratios(self) -> dict[str, float]:
        return {m: self.ratio(m) for m in METRIC_NAMES}

    def table_text(self) -> str:
        lines = [f"{'metric':<8}{'ratio':>14}{'sum_inpainted':>16}{'sum_masked':>16}{'n':>6}"]
        for m in METRIC_NAMES:
            lines.append(
                f"{m:<8}{self.ratio(m):>14.6f}{sum(self.inpainted[m]):>16.6f}"
                f"{sum(self.masked[m]):>16.6f}{self.count:>6d}"
            )
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Path:
        """Write the plain-text table, the key-value file, and one
        per-sample CSV per metric. Returns the key-value file path."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(self.table_text())
        kv_lines = []
        for m in METRIC_NAMES:
            csv_name = f"{m}_samples.csv"
            with open(out_dir / csv_name, "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["sample_id", "inpainted", "masked"])
                for sid, iv, mv in zip(self.sample_ids, self.inpainted[m], self.masked[m]):
                    writer.writerow([sid, repr(iv), repr(mv)])
            kv_lines.append(f"{m}\t{csv_name}\t{self.ratio(m)!r}")
        kv_path = out_dir / "report.kv"
        kv_path.write_text("\n".join(kv_lines) + "\n")
        return kv_path


def read_report_kv(path) -> dict[str, float]:
    """Parse a key-value report back into {metric: ratio}."""
    out = {}
    for line in Path(path).read_text().splitlines():
        name, _, ratio = line.split("\t")
        out[name] = float(ratio)
    return out
