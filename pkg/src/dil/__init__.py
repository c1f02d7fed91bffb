"""Depth-guided image inpainting lab.

A self-contained desk-scale toolkit: a reverse-mode autodiff engine, three
encoder-decoder inpainting architectures (plain, depth-enhanced with
single-head attention, depth-enhanced with multi-head attention), line and
square occlusion masks, a full metric suite with ratio aggregation, Adam
training, and Grad-CAM inspection.
"""

from dil.masking import Mask, MaskSpec, apply_mask, gen_mask
from dil.metrics import MetricReport, lpips_distance, metric_ratio, psnr, ssd, ssim
from dil.models import ArchConfig, build_model, load_model, save_model
from dil.tensor import Tensor, backward, no_grad, zero_grad
from dil.training import TrainConfig, adam_step, evaluate, split_dataset, train

__all__ = [
    "ArchConfig",
    "Mask",
    "MaskSpec",
    "MetricReport",
    "Tensor",
    "TrainConfig",
    "adam_step",
    "apply_mask",
    "backward",
    "build_model",
    "evaluate",
    "gen_mask",
    "load_model",
    "lpips_distance",
    "metric_ratio",
    "no_grad",
    "psnr",
    "save_model",
    "split_dataset",
    "ssd",
    "ssim",
    "train",
    "zero_grad",
]
__version__ = "0.1.0"
