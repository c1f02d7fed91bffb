"""Gradient-weighted activation maps at the deepest encoder feature map.

The map is taken just before the decoder: the bottleneck for the plain
model, the fused bottleneck for the depth models (either encoder's own
bottleneck is selectable). The differentiated scalar is the
reconstruction MSE against the ground truth by default, or the mean of
the output; an inpainting network has no class score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dil.dataio import Sample, resize_bilinear, save_image
from dil.masking import Mask, apply_mask
from dil.models import Model
from dil.tensor import Tensor, backward, clear_tape, mul, sub, tmean, zero_grad

TARGET_KINDS = ("reconstruction_mse", "output_mean")


@dataclass
class CamResult:
    heatmap: np.ndarray  # (H, W) in [0, 1]
    target_kind: str
    layer_id: str


def raw_cam(activation: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """ReLU of the gradient-weighted channel sum: weights are the spatial
    means of the gradients, one per channel."""
    if activation.shape != grads.shape:
        raise ValueError(f"activation {activation.shape} != grads {grads.shape}")
    weights = grads.mean(axis=(1, 2))
    cam = (weights[:, None, None] * activation).sum(axis=0)
    return np.maximum(cam, 0.0)


def normalize_cam(cam: np.ndarray) -> np.ndarray:
    """Min-max to [0,1]; a constant map becomes all zeros."""
    lo = float(cam.min())
    hi = float(cam.max())
    if hi - lo == 0.0:
        return np.zeros_like(cam)
    return (cam - lo) / (hi - lo)


def gradcam(model: Model, sample: Sample, mask: Mask,
            target_kind: str = "reconstruction_mse",
            layer: str | None = None) -> CamResult:
    """Heatmap of where the model's computation concentrates for one
    masked sample. Runs the model in eval mode with the tape enabled."""
    if target_kind not in TARGET_KINDS:
        raise ValueError(f"unknown target {target_kind!r}, expected one of {TARGET_KINDS}")
    rgb_m, depth_m = apply_mask(sample.rgb, sample.depth, mask)
    clear_tape()
    rgb_t = Tensor(rgb_m[None].astype(np.float32))
    depth_t = Tensor(depth_m[None].astype(np.float32))
    out, feats = model.forward_with_features(
        rgb_t, None if model.kind == "baseline" else depth_t, training=False)

    layer_id = layer if layer is not None else feats["cam_layer"]
    if layer_id not in feats or not isinstance(feats.get(layer_id), Tensor):
        known = [k for k, v in feats.items() if isinstance(v, Tensor)]
        raise ValueError(f"unknown feature layer {layer_id!r}, expected one of {known}")
    fmap = feats[layer_id]

    if target_kind == "reconstruction_mse":
        gt = Tensor(sample.rgb[None].astype(np.float32))
        d = sub(out, gt)
        target = tmean(mul(d, d))
    else:
        target = tmean(out)
    backward(target)
    params = [p for _, p in model.named_parameters()]
    grads = fmap.grad
    zero_grad(params)
    if grads is None:
        raise RuntimeError(f"no gradient reached feature layer {layer_id!r}")

    cam = raw_cam(fmap.data[0], grads[0])
    h, w = sample.rgb.shape[1:]
    cam_up = resize_bilinear(cam[None].astype(np.float32), h, w)[0]
    return CamResult(heatmap=normalize_cam(cam_up), target_kind=target_kind,
                     layer_id=layer_id)


def export_overlay(cam: CamResult, rgb: np.ndarray, path) -> None:
    """Side-by-side panel: input | heatmap (grayscale) | overlay.

    The overlay blends toward the heat value with per-pixel alpha
    0.5 * heat, so zero heat leaves the input untouched.
    """
    heat = cam.heatmap
    if rgb.shape[1:] != heat.shape:
        raise ValueError(f"rgb {rgb.shape[1:]} and heatmap {heat.shape} dims differ")
    heat3 = np.repeat(heat[None], 3, axis=0)
    alpha = 0.5 * heat3
    overlay = rgb * (1.0 - alpha) + heat3 * alpha
    panel = np.concatenate([rgb, heat3, overlay], axis=2)
    save_image(np.clip(panel, 0.0, 1.0), path)
