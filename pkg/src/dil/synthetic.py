"""Synthetic RGB-D scene generator.

Indoor-flavored scenes built so the depth channel genuinely matters:

- a shallow sloped background plane crowded with vivid boxes whose colors
  follow a fixed depth-keyed palette plus per-box stripe texture, making
  RGB-only interpolation under an occlusion nontrivial;
- one or two very deep "openings" (think doorways) per scene, which own
  the dataset's global depth maximum. Normal content therefore sits well
  below 1.0 after depth normalization, so the white occlusion fill is
  unmistakable in the depth channel while staying only marginally
  brighter than the palette in RGB. A depth-aware model can localize the
  occlusions; an RGB-only model has a much weaker cue.

No RGB pixel reaches the pure white used as the occlusion fill. Scenes
are written in the standard dataset layout (8-bit RGB PNG, 16-bit depth
PNG, manifest with the global depth maximum), which also exercises the
full loading path.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from dil.dataio import save_depth16_png, save_image, write_manifest

RGB_CLIP = (0.02, 0.95)
DEPTH_NEAR_M = 0.8
DEPTH_SPAN_M = 3.2


def _palette(d: np.ndarray) -> np.ndarray:
    """Fixed depth-to-color map; d in [0,1], output (3,H,W)."""
    r = 0.15 + 0.65 * d
    g = 0.80 - 0.55 * d
    b = 0.25 + 0.50 * d * d
    return np.stack([r, g, b])


def make_scene(rng: np.random.Generator, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """One scene: (rgb (3,h,w) float in [0,1], physical depth (h,w) in meters)."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)

    d_bg = (
        rng.uniform(0.38, 0.48)
        + rng.uniform(-0.1, 0.1) * (xx - 0.5)
        + rng.uniform(-0.1, 0.1) * (yy - 0.5)
    )
    depth = np.clip(d_bg, 0.0, 1.0).copy()
    rgb = _palette(depth)
    # low-frequency color modulation so smooth interpolation is wrong
    fx, fy = rng.uniform(1.0, 3.0, 2)
    ph1, ph2 = rng.uniform(0, 2 * np.pi, 2)
    rgb[0] += 0.10 * np.sin(2 * np.pi * fx * xx + ph1)
    rgb[2] += 0.10 * np.sin(2 * np.pi * fy * yy + ph2)

    # deep openings; these own the dataset's depth maximum
    for _ in range(int(rng.integers(1, 3))):
        oh = int(rng.uniform(0.15, 0.35) * h)
        ow = int(rng.uniform(0.10, 0.25) * w)
        top = int(rng.integers(0, max(h - oh, 1)))
        left = int(rng.integers(0, max(w - ow, 1)))
        d_open = rng.uniform(0.93, 1.0)
        depth[top : top + oh, left : left + ow] = d_open
        rgb[:, top : top + oh, left : left + ow] = _palette(np.full((oh, ow), d_open))

    n_boxes = int(rng.integers(8, 15))
    box_depths = np.sort(rng.uniform(0.05, 0.30, n_boxes))[::-1]  # far to near
    for d_box in box_depths:
        bh = int(rng.uniform(0.08, 0.35) * h)
        bw = int(rng.uniform(0.08, 0.35) * w)
        top = int(rng.integers(0, max(h - bh, 1)))
        left = int(rng.integers(0, max(w - bw, 1)))
        ys = slice(top, top + bh)
        xs = slice(left, left + bw)
        depth[ys, xs] = d_box
        rgb[:, ys, xs] = _palette(np.full((bh, bw), d_box))
        rgb[:, ys, xs] += rng.uniform(-0.05, 0.05, 3)[:, None, None]
        # stripe texture keyed to the box depth
        freq = 3.0 + 9.0 * d_box
        angle = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        coord = np.cos(angle) * xx[ys, xs] + np.sin(angle) * yy[ys, xs]
        stripes = rng.uniform(0.05, 0.12) * np.sin(2 * np.pi * freq * coord + phase)
        rgb[:, ys, xs] += stripes[None]

    rgb *= 0.90 + 0.10 * xx + 0.06 * yy
    rgb = np.clip(rgb, *RGB_CLIP)
    return rgb.astype(np.float32), (DEPTH_NEAR_M + DEPTH_SPAN_M * depth).astype(np.float32)


def write_synthetic_dataset(root, n: int, seed: int = 0,
                            h: int = 240, w: int = 320) -> Path:
    """Generate ``n`` scenes under ``root`` in the standard layout."""
    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)

    scenes = []
    for i in range(n):
        rng = np.random.default_rng([seed, i, 0xD5])
        scenes.append(make_scene(rng, h, w))
    depth_max = float(max(d.max() for _, d in scenes))

    entries = []
    for i, (rgb, depth) in enumerate(scenes):
        sid = f"s{i:04d}"
        save_image(rgb, root / "rgb" / f"{sid}.png")
        save_depth16_png(depth, depth_max, root / "depth" / f"{sid}.png")
        entries.append((sid, f"rgb/{sid}.png", f"depth/{sid}.png"))
    write_manifest(root, entries, depth_max)
    return root


def main(argv=None) -> int:
    import argparse

    parser = argparse.ArgumentParser(
        prog="dil.synthetic", description="generate a synthetic RGB-D dataset")
    parser.add_argument("out", help="output dataset root")
    parser.add_argument("--n", type=int, default=16, help="number of scenes")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--height", type=int, default=240)
    parser.add_argument("--width", type=int, default=320)
    args = parser.parse_args(argv)
    root = write_synthetic_dataset(args.out, args.n, args.seed, args.height, args.width)
    print(f"wrote {args.n} samples to {root}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
