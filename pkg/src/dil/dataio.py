"""On-disk dataset layout, image loading, resizing, and export.

Layout: ``root/rgb/{id}.png`` (8-bit RGB), ``root/depth/{id}.png``
(16-bit grayscale), and ``root/manifest.tsv`` whose header line records
the global depth maximum::

    #depth_max=<float>
    id<TAB>rgb/<id>.png<TAB>depth/<id>.png

Stored 16-bit depth values are a fixed-point encoding where 65535
corresponds to ``depth_max``; dividing by 65535 therefore normalizes the
physical depth by the global dataset maximum.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

TARGET_H, TARGET_W = 240, 320


@dataclass
class Sample:
    id: str
    rgb: np.ndarray    # (3, H, W) float32 in [0, 1]
    depth: np.ndarray  # (1, H, W) float32 in [0, 1]
    rgb_path: str = ""
    depth_path: str = ""


@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, str, str]]  # (id, rgb_rel, depth_rel)
    depth_max: float


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers; (C,H,W) in, (C,oh,ow) out."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bad output size {out_h}x{out_w}")
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    p00 = img[:, y0[:, None], x0[None, :]]
    p01 = img[:, y0[:, None], x1[None, :]]
    p10 = img[:, y1[:, None], x0[None, :]]
    p11 = img[:, y1[:, None], x1[None, :]]
    top = p00 * (1 - wx) + p01 * wx
    bot = p10 * (1 - wx) + p11 * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype)


def load_rgb_png(path) -> np.ndarray:
    """8-bit 3-channel PNG to a (3,H,W) float32 array in [0,1]."""
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise ValueError(f"cannot read RGB image {path}: {exc}") from exc
    if img.mode != "RGB":
        raise ValueError(f"{path}: expected 8-bit RGB, got mode {img.mode!r}")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_depth_png(path) -> np.ndarray:
    """16-bit single-channel PNG to an (H,W) float32 array in [0,1]."""
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise ValueError(f"cannot read depth image {path}: {exc}") from exc
    if img.mode not in ("I", "I;16", "I;16B"):
        raise ValueError(f"{path}: expected 16-bit grayscale, got mode {img.mode!r}")
    arr = np.asarray(img).astype(np.float32)
    if arr.ndim != 2:
        raise ValueError(f"{path}: depth must be single-channel, got shape {arr.shape}")
    if arr.max(initial=0) > 65535 or arr.min(initial=0) < 0:
        raise ValueError(f"{path}: depth values outside the 16-bit range")
    return arr / 65535.0


def save_image(img: np.ndarray, path) -> None:
    """Write a [0,1] float image as 8-bit PNG with round-half-up."""
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"save_image expects (H,W), (1,H,W) or (3,H,W), got {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError(
            f"save_image values outside [0,1]: min {img.min():.4g} max {img.max():.4g}"
        )
    quantized = np.floor(img.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)
    if quantized.shape[0] == 1:
        pil = Image.fromarray(quantized[0], mode="L")
    else:
        pil = Image.fromarray(quantized.transpose(1, 2, 0), mode="RGB")
    try:
        pil.save(path)
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def save_depth16_png(depth_physical: np.ndarray, depth_max: float, path) -> None:
    """Encode physical depth as 16-bit fixed point with 65535 = depth_max."""
    if depth_max <= 0:
        raise ValueError(f"depth_max must be positive, got {depth_max}")
    scaled = np.clip(depth_physical / depth_max, 0.0, 1.0)
    arr = np.floor(scaled.astype(np.float64) * 65535.0 + 0.5).astype("<u2")
    Image.fromarray(arr).save(path)  # uint16 maps to mode I;16


# ---------------------------------------------------------------------------
# Manifest handling


def write_manifest(root, entries: list[tuple[str, str, str]], depth_max: float) -> Path:
    root = Path(root)
    lines = [f"#depth_max={depth_max!r}"]
    lines += [f"{sid}\t{rgb}\t{dep}" for sid, rgb, dep in entries]
    path = root / "manifest.tsv"
    path.write_text("\n".join(lines) + "\n")
    return path


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.tsv"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("#depth_max="):
        raise ValueError(f"{path}: first line must be '#depth_max=<float>'")
    depth_max = float(lines[0].split("=", 1)[1])
    if depth_max <= 0:
        raise ValueError(f"{path}: depth_max must be positive, got {depth_max}")
    entries = []
    seen = set()
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{i}: expected 'id<TAB>rgb<TAB>depth', got {line!r}")
        sid = parts[0]
        if sid in seen:
            raise ValueError(f"{path}:{i}: duplicate sample id {sid!r}")
        seen.add(sid)
        entries.append((sid, parts[1], parts[2]))
    return DatasetManifest(root=root, entries=entries, depth_max=depth_max)


def load_sample(manifest: DatasetManifest, index: int,
                target: tuple[int, int] = (TARGET_H, TARGET_W)) -> Sample:
    sid, rgb_rel, depth_rel = manifest.entries[index]
    rgb_path = manifest.root / rgb_rel
    depth_path = manifest.root / depth_rel
    rgb = load_rgb_png(rgb_path)
    depth = load_depth_png(depth_path)[None]
    if rgb.shape[1:] != depth.shape[1:]:
        raise ValueError(
            f"{sid}: rgb is {rgb.shape[1:]}, depth is {depth.shape[1:]}"
        )
    th, tw = target
    if rgb.shape[1:] != (th, tw):
        rgb = resize_bilinear(rgb, th, tw)
        depth = resize_bilinear(depth, th, tw)
    return Sample(id=sid, rgb=rgb.astype(np.float32), depth=depth.astype(np.float32),
                  rgb_path=str(rgb_path), depth_path=str(depth_path))


def load_dataset(root, target: tuple[int, int] = (TARGET_H, TARGET_W)) -> list[Sample]:
    manifest = load_manifest(root)
    return [load_sample(manifest, i, target) for i in range(len(manifest.entries))]


def center_crop(sample: Sample, h: int, w: int) -> Sample:
    _, sh, sw = sample.rgb.shape
    if h > sh or w > sw:
        raise ValueError(f"crop {h}x{w} larger than sample {sh}x{sw}")
    top = (sh - h) // 2
    left = (sw - w) // 2
    return Sample(
        id=sample.id,
        rgb=np.ascontiguousarray(sample.rgb[:, top : top + h, left : left + w]),
        depth=np.ascontiguousarray(sample.depth[:, top : top + h, left : left + w]),
        rgb_path=sample.rgb_path,
        depth_path=sample.depth_path,
    )


def dataset_check(root) -> list[str]:
    """Validate a dataset directory; returns a list of problems (empty = ok)."""
    errors: list[str] = []
    try:
        manifest = load_manifest(root)
    except (OSError, ValueError) as exc:
        return [str(exc)]
    if not manifest.entries:
        errors.append(f"{manifest.root}: manifest lists no samples")
    for i, (sid, rgb_rel, depth_rel) in enumerate(manifest.entries):
        for rel in (rgb_rel, depth_rel):
            if not (manifest.root / rel).exists():
                errors.append(f"{sid}: missing file {manifest.root / rel}")
        try:
            sample = load_sample(manifest, i)
        except (OSError, ValueError) as exc:
            errors.append(f"{sid}: {exc}")
            continue
        for name, arr in (("rgb", sample.rgb), ("depth", sample.depth)):
            if arr.min() < 0.0 or arr.max() > 1.0:
                errors.append(f"{sid}: {name} values outside [0,1]")
            if not np.all(np.isfinite(arr)):
                errors.append(f"{sid}: {name} has non-finite values")
    return errors
