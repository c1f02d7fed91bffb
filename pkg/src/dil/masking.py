"""Seedable line and square occlusion masks, applied identically to the
RGB image and the depth map.

Every mask is a pure function of (seed, sample_index, spec, dims): the
per-sample RNG stream is keyed by seed, index, and mask kind, so the two
kinds never share draws. Occluded pixels are overwritten with the fill
value (1.0 = white in normalized space); the mask itself is never handed
to a model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_KIND_CODE = {"line": 1, "square": 2}


@dataclass
class MaskSpec:
    kind: str = "line"
    seed: int = 0
    line_count: tuple[int, int] = (5, 15)
    line_thickness: tuple[int, int] = (1, 5)
    square_count: tuple[int, int] = (1, 5)
    square_side: tuple[int, int] = (20, 60)
    fill_value: float = 1.0

    def __post_init__(self):
        if self.kind not in _KIND_CODE:
            raise ValueError(f"mask kind must be 'line' or 'square', got {self.kind!r}")
        for name in ("line_count", "line_thickness", "square_count", "square_side"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} range ({lo}, {hi}) is empty or non-positive")


@dataclass
class Mask:
    bits: np.ndarray  # (H, W) bool, True = occluded

    @property
    def occluded_fraction(self) -> float:
        return float(self.bits.mean())


def _disc_offsets(radius: int) -> np.ndarray:
    r = int(radius)
    ys, xs = np.mgrid[-r : r + 1, -r : r + 1]
    keep = ys * ys + xs * xs <= r * r
    return np.stack([ys[keep], xs[keep]], axis=1)


def gen_mask(spec: MaskSpec, h: int, w: int, sample_index: int) -> Mask:
    """Deterministic mask for one sample.

    Lines are integer walks between two uniform endpoints, thickened by a
    disc of radius ceil(thickness/2); squares are axis-aligned and placed
    fully inside the frame.
    """
    if h < 64 or w < 64:
        raise ValueError(f"mask dims {h}x{w} too small (need >= 64)")
    side_hi = spec.square_side[1]
    if spec.kind == "square" and (side_hi > h or side_hi > w):
        raise ValueError(f"square side up to {side_hi} does not fit in {h}x{w}")
    rng = np.random.default_rng([spec.seed, sample_index, _KIND_CODE[spec.kind]])
    bits = np.zeros((h, w), dtype=bool)

    if spec.kind == "line":
        count = int(rng.integers(spec.line_count[0], spec.line_count[1] + 1))
        for _ in range(count):
            x0, x1 = rng.integers(0, w, size=2)
            y0, y1 = rng.integers(0, h, size=2)
            thickness = int(rng.integers(spec.line_thickness[0], spec.line_thickness[1] + 1))
            steps = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
            ys = np.rint(np.linspace(y0, y1, steps)).astype(np.int64)
            xs = np.rint(np.linspace(x0, x1, steps)).astype(np.int64)
            offs = _disc_offsets(int(np.ceil(thickness / 2)))
            py = (ys[:, None] + offs[None, :, 0]).clip(0, h - 1)
            px = (xs[:, None] + offs[None, :, 1]).clip(0, w - 1)
            bits[py.reshape(-1), px.reshape(-1)] = True
    else:
        count = int(rng.integers(spec.square_count[0], spec.square_count[1] + 1))
        for _ in range(count):
            side = int(rng.integers(spec.square_side[0], spec.square_side[1] + 1))
            top = int(rng.integers(0, h - side + 1))
            left = int(rng.integers(0, w - side + 1))
            bits[top : top + side, left : left + side] = True

    occluded = int(bits.sum())
    if occluded == 0 or occluded == h * w:
        raise ValueError(f"degenerate mask: {occluded} of {h * w} pixels occluded")
    return Mask(bits)


def apply_mask(rgb: np.ndarray, depth: np.ndarray | None, mask: Mask,
               fill_value: float = 1.0) -> tuple[np.ndarray, np.ndarray | None]:
    """Overwrite occluded pixels with the fill value in every channel of
    both images; the same bit pattern hits RGB and depth."""
    if rgb.shape[-2:] != mask.bits.shape:
        raise ValueError(f"rgb dims {rgb.shape[-2:]} != mask dims {mask.bits.shape}")
    rgb_masked = rgb.copy()
    rgb_masked[..., mask.bits] = fill_value
    depth_masked = None
    if depth is not None:
        if depth.shape[-2:] != mask.bits.shape:
            raise ValueError(f"depth dims {depth.shape[-2:]} != mask dims {mask.bits.shape}")
        depth_masked = depth.copy()
        depth_masked[..., mask.bits] = fill_value
    return rgb_masked, depth_masked


def mask_to_png_bytes(mask: Mask) -> np.ndarray:
    """8-bit grayscale image: 0 = keep, 255 = occluded."""
    return np.where(mask.bits, 255, 0).astype(np.uint8)


def save_mask_png(mask: Mask, path) -> None:
    from PIL import Image

    Image.fromarray(mask_to_png_bytes(mask), mode="L").save(path)
