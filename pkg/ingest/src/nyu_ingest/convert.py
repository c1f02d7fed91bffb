"""Export RGB/depth pairs from the labeled NYU Depth V2 archive.

The labeled archive is a MATLAB v7.3 file, i.e. HDF5, holding ``images``
(uint8, MATLAB dims 480x640x3xN) and ``depths`` (float meters, MATLAB
dims 480x640xN). h5py presents the dimensions reversed, so entry ``i``
arrives as (3, 640, 480) and (640, 480) and is transposed back here.

Output layout (consumed by the lab through its file formats only)::

    out_root/rgb/{id}.png      8-bit RGB
    out_root/depth/{id}.png    16-bit grayscale, 65535 = depth_max
    out_root/manifest.tsv      '#depth_max=<float>' header, then
                               id<TAB>rgb_path<TAB>depth_path rows

Depth is stored as 16-bit fixed point scaled by the true global maximum
of the exported subset, which is recorded in the manifest header.
"""

from __future__ import annotations

import argparse
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

import h5py
import numpy as np
from PIL import Image


@dataclass
class IngestConfig:
    archive: Path
    out_root: Path
    limit: int | None = None
    resize: bool = False  # halve both dims (480x640 -> 240x320)

    def __post_init__(self):
        self.archive = Path(self.archive)
        self.out_root = Path(self.out_root)
        if self.limit is not None and self.limit < 1:
            raise ValueError(f"limit must be >= 1, got {self.limit}")


class IngestError(RuntimeError):
    pass


def _halve(img: np.ndarray) -> np.ndarray:
    """2x2 block mean over the leading two (spatial) axes."""
    h, w = img.shape[:2]
    if h % 2 or w % 2:
        raise IngestError(f"--resize needs even dims, got {h}x{w}")
    blocks = img.reshape(h // 2, 2, w // 2, 2, *img.shape[2:])
    return blocks.mean(axis=(1, 3))


def _prepare_out(root: Path) -> None:
    if root.exists():
        if any(root.iterdir()):
            raise IngestError(
                f"output {root} exists and is not empty; refusing to overwrite"
            )
    else:
        root.mkdir(parents=True)
    (root / "rgb").mkdir()
    (root / "depth").mkdir()


def _cleanup(root: Path) -> None:
    for sub in ("rgb", "depth"):
        shutil.rmtree(root / sub, ignore_errors=True)
    (root / "manifest.tsv").unlink(missing_ok=True)


def convert(cfg: IngestConfig) -> Path:
    """Export pairs; returns the manifest path. Partial output is removed
    on any failure."""
    if not cfg.archive.exists():
        raise IngestError(f"archive not found: {cfg.archive}")
    try:
        archive = h5py.File(cfg.archive, "r")
    except OSError as exc:
        raise IngestError(f"cannot open archive {cfg.archive}: {exc}") from exc

    with archive:
        for key in ("images", "depths"):
            if key not in archive:
                raise IngestError(f"{cfg.archive}: missing dataset {key!r}")
        images = archive["images"]
        depths = archive["depths"]
        if images.shape[0] != depths.shape[0]:
            raise IngestError(
                f"{cfg.archive}: {images.shape[0]} images vs "
                f"{depths.shape[0]} depths"
            )
        if images.ndim != 4 or images.shape[1] != 3:
            raise IngestError(
                f"{cfg.archive}: images must be (N,3,W,H), got {images.shape}"
            )
        n_total = images.shape[0]
        count = min(n_total, cfg.limit) if cfg.limit else n_total

        _prepare_out(cfg.out_root)
        try:
            pairs = []
            depth_max = 0.0
            for i in range(count):
                rgb = np.asarray(images[i]).transpose(2, 1, 0)  # (H, W, 3)
                depth = np.asarray(depths[i], dtype=np.float64).T  # (H, W)
                if rgb.dtype != np.uint8:
                    raise IngestError(
                        f"{cfg.archive}: images must be uint8, got {rgb.dtype}"
                    )
                if not np.all(np.isfinite(depth)) or depth.min() < 0:
                    raise IngestError(f"pair {i}: bad depth values")
                if cfg.resize:
                    rgb = np.floor(_halve(rgb.astype(np.float64)) + 0.5).astype(np.uint8)
                    depth = _halve(depth)
                pairs.append((rgb, depth))
                depth_max = max(depth_max, float(depth.max()))
            if depth_max <= 0:
                raise IngestError("all exported depths are zero")

            entries = []
            for i, (rgb, depth) in enumerate(pairs):
                sid = f"n{i:04d}"
                Image.fromarray(rgb).save(cfg.out_root / "rgb" / f"{sid}.png")
                stored = np.floor(depth / depth_max * 65535.0 + 0.5).astype("<u2")
                Image.fromarray(stored).save(cfg.out_root / "depth" / f"{sid}.png")
                entries.append(sid)

            lines = [f"#depth_max={depth_max!r}"]
            lines += [f"{sid}\trgb/{sid}.png\tdepth/{sid}.png" for sid in entries]
            manifest = cfg.out_root / "manifest.tsv"
            manifest.write_text("\n".join(lines) + "\n")
        except Exception:
            _cleanup(cfg.out_root)
            raise
    return manifest


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ingest",
        description="convert the NYU Depth V2 labeled archive to the lab's dataset layout")
    parser.add_argument("archive", help="path to the labeled .mat (HDF5) archive")
    parser.add_argument("out_root", help="fresh output directory")
    parser.add_argument("--limit", type=int, help="export at most N pairs")
    parser.add_argument("--resize", action="store_true",
                        help="halve both dimensions (480x640 -> 240x320)")
    args = parser.parse_args(argv)
    try:
        manifest = convert(IngestConfig(args.archive, args.out_root,
                                        args.limit, args.resize))
    except (IngestError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {manifest}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
