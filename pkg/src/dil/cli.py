"""Command-line entry point.

Configuration layering: flags override config-file entries (plain
``key=value`` lines), which override built-in defaults. All randomness
flows from one ``--seed`` and fans out into fixed named streams (split,
mask, init), so any run can be reproduced from its echoed configuration.
``DIL_LOG={info|debug}`` controls verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

log = logging.getLogger("dil")

DEFAULTS: dict = {
    "model": "baseline",
    "mask": "line",
    "seed": 0,
    "lr": 1e-3,
    "weight_decay": 0.0,
    "epochs": 100,
    "batch": 4,
    "jobs": 1,
    "crop": None,
    "target": "mse",
    "layer": None,
    "line_count": "5:15",
    "line_thickness": "1:5",
    "square_count": "1:5",
    "square_side": "20:60",
    "train_frac": 0.8,
    "val_frac": 0.1,
    "test_frac": 0.1,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_eps": 1e-8,
    "lpips_checkpoint": None,
    "index": 0,
    "height": 240,
    "width": 320,
    "kind": "line",
}

_STREAMS = {"split": 1, "mask": 2, "init": 3}


def derive_seed(seed: int, stream: str) -> int:
    """Named deterministic substream of the master seed."""
    state = np.random.SeedSequence([int(seed), _STREAMS[stream]]).generate_state(1, np.uint64)
    return int(state[0])


def _parse_range(text: str) -> tuple[int, int]:
    lo, _, hi = str(text).partition(":")
    if not hi:
        raise ValueError(f"expected MIN:MAX, got {text!r}")
    return int(lo), int(hi)


def _parse_crop(text: str | None) -> tuple[int, int] | None:
    if text in (None, "", "none"):
        return None
    h, _, w = str(text).lower().partition("x")
    if not w:
        raise ValueError(f"expected HxW, got {text!r}")
    return int(h), int(w)


def read_config_file(path) -> dict:
    """Plain key=value lines; '#' starts a comment."""
    out = {}
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{i}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults <- config file <- flags; echoes the result to the log."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        file_cfg = read_config_file(args.config)
        unknown = set(file_cfg) - set(DEFAULTS) - {"data", "out", "checkpoint"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key, value in vars(args).items():
        if key in ("command", "config", "func"):
            continue
        if value is not None:
            cfg[key] = value
    # normalize types that may arrive as strings from the config file
    for key in ("seed", "epochs", "batch", "jobs", "index", "height", "width"):
        if key in cfg and cfg[key] is not None:
            cfg[key] = int(cfg[key])
    for key in ("lr", "weight_decay", "train_frac", "val_frac", "test_frac",
                "beta1", "beta2", "adam_eps"):
        if key in cfg and cfg[key] is not None:
            cfg[key] = float(cfg[key])
    for key in sorted(cfg):
        log.info("config %s=%s", key, cfg[key])
    return cfg


def build_mask_spec(cfg: dict, kind_key: str = "mask"):
    from dil.masking import MaskSpec

    return MaskSpec(
        kind=cfg[kind_key],
        seed=derive_seed(cfg["seed"], "mask"),
        line_count=_parse_range(cfg["line_count"]),
        line_thickness=_parse_range(cfg["line_thickness"]),
        square_count=_parse_range(cfg["square_count"]),
        square_side=_parse_range(cfg["square_side"]),
    )


def _load_samples(cfg: dict):
    from dil.dataio import center_crop, load_dataset

    samples = load_dataset(cfg["data"])
    crop = _parse_crop(cfg.get("crop"))
    if crop is not None:
        samples = [center_crop(s, *crop) for s in samples]
    return samples


def _test_split(cfg: dict, n: int):
    from dil.training import split_dataset

    fracs = (cfg["train_frac"], cfg["val_frac"], cfg["test_frac"])
    return split_dataset(n, fracs, derive_seed(cfg["seed"], "split"))


def _load_model_for_eval(cfg: dict):
    from dil.models import load_model

    return load_model(cfg["checkpoint"])


def _extractor(cfg: dict, model):
    from dil.models import load_model
    from dil.training import EncoderFeatureExtractor

    if cfg.get("lpips_checkpoint"):
        return EncoderFeatureExtractor(load_model(cfg["lpips_checkpoint"]))
    return EncoderFeatureExtractor(model)


# ---------------------------------------------------------------------------
# Commands


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    from dil.models import build_model
    from dil.training import TrainConfig, train

    samples = _load_samples(cfg)
    tc = TrainConfig(
        learning_rate=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        epsilon=cfg["adam_eps"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch"],
        train_frac=cfg["train_frac"],
        val_frac=cfg["val_frac"],
        test_frac=cfg["test_frac"],
        split_seed=derive_seed(cfg["seed"], "split"),
        mask_spec=build_mask_spec(cfg),
    )
    model = build_model(cfg["model"], init_seed=derive_seed(cfg["seed"], "init"))
    log.info("model %s", model.manifest_line())
    result = train(model, samples, tc, cfg["out"])
    print(f"best checkpoint: {result.best_checkpoint} "
          f"(epoch {result.best_epoch}, val_mse {result.best_val_mse:.6f})")
    print(f"history: {Path(cfg['out']) / 'history.csv'}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    from dil.training import evaluate

    model = _load_model_for_eval(cfg)
    samples = _load_samples(cfg)
    _, _, test_idx = _test_split(cfg, len(samples))
    report = evaluate(model.predict, [samples[i] for i in test_idx],
                      build_mask_spec(cfg), _extractor(cfg, model),
                      mask_indices=test_idx, jobs=cfg["jobs"])
    kv_path = report.write(cfg["out"])
    print(report.table_text(), end="")
    print(f"report: {kv_path}")
    return 0


def cmd_inpaint(args) -> int:
    cfg = resolve_config(args)
    from dil.dataio import save_image
    from dil.masking import apply_mask, gen_mask

    model = _load_model_for_eval(cfg)
    samples = _load_samples(cfg)
    _, _, test_idx = _test_split(cfg, len(samples))
    spec = build_mask_spec(cfg)
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(i):
        s = samples[i]
        h, w = s.rgb.shape[1:]
        mask = gen_mask(spec, h, w, i)
        rgb_m, depth_m = apply_mask(s.rgb, s.depth, mask, spec.fill_value)
        inpainted = np.clip(model.predict(rgb_m, depth_m), 0.0, 1.0)
        save_image(rgb_m, out_dir / f"{s.id}_masked.png")
        save_image(inpainted, out_dir / f"{s.id}_inpainted.png")
        return s.id

    for sid in _fan_out(one, test_idx, cfg["jobs"]):
        log.info("inpainted %s", sid)
    print(f"wrote {2 * len(test_idx)} images to {out_dir}")
    return 0


def cmd_gradcam(args) -> int:
    cfg = resolve_config(args)
    from dil.gradcam import export_overlay, gradcam
    from dil.masking import gen_mask

    model = _load_model_for_eval(cfg)
    samples = _load_samples(cfg)
    _, _, test_idx = _test_split(cfg, len(samples))
    spec = build_mask_spec(cfg)
    target = {"mse": "reconstruction_mse", "mean": "output_mean"}.get(
        cfg["target"], cfg["target"])
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(i):
        s = samples[i]
        h, w = s.rgb.shape[1:]
        mask = gen_mask(spec, h, w, i)
        cam = gradcam(model, s, mask, target_kind=target, layer=cfg.get("layer"))
        name = f"{s.id}_{model.kind}_{spec.kind}_cam.png"
        export_overlay(cam, s.rgb, out_dir / name)
        return name

    for name in _fan_out(one, test_idx, cfg["jobs"]):
        log.info("wrote %s", name)
    print(f"wrote {len(test_idx)} overlays to {out_dir}")
    return 0


def cmd_mask_preview(args) -> int:
    cfg = resolve_config(args)
    from dil.masking import gen_mask, save_mask_png

    spec = build_mask_spec(cfg, kind_key="kind")
    mask = gen_mask(spec, cfg["height"], cfg["width"], cfg["index"])
    save_mask_png(mask, cfg["out"])
    print(f"wrote {cfg['out']} ({mask.occluded_fraction:.1%} occluded)")
    return 0


def cmd_dataset_check(args) -> int:
    cfg = resolve_config(args)
    from dil.dataio import dataset_check, load_manifest

    errors = dataset_check(cfg["data"])
    if errors:
        for err in errors:
            print(f"error: {err}", file=sys.stderr)
        return 1
    n = len(load_manifest(cfg["data"]).entries)
    print(f"dataset ok ({n} samples)")
    return 0


def _fan_out(fn, items, jobs: int):
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


# ---------------------------------------------------------------------------
# Parser


def _add_common(p, *, data=False, out=False, checkpoint=False, mask=False,
                split=False):
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="key=value config file; flags take precedence")
    if data:
        p.add_argument("--data", required=True, help="dataset root directory")
        p.add_argument("--crop", help="center-crop samples to HxW after loading")
    if split:
        p.add_argument("--train-frac", dest="train_frac", type=float)
        p.add_argument("--val-frac", dest="val_frac", type=float)
        p.add_argument("--test-frac", dest="test_frac", type=float)
    if out:
        p.add_argument("--out", required=True)
    if checkpoint:
        p.add_argument("--checkpoint", required=True)
    if mask:
        p.add_argument("--mask", choices=["line", "square"])
        p.add_argument("--line-count", dest="line_count", help="MIN:MAX")
        p.add_argument("--line-thickness", dest="line_thickness", help="MIN:MAX")
        p.add_argument("--square-count", dest="square_count", help="MIN:MAX")
        p.add_argument("--square-side", dest="square_side", help="MIN:MAX")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dil", description="depth-guided image inpainting lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_common(p, data=True, out=True, mask=True)
    p.add_argument("--model", choices=["baseline", "de-sha", "de-mha"])
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--adam-eps", dest="adam_eps", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--train-frac", dest="train_frac", type=float)
    p.add_argument("--val-frac", dest="val_frac", type=float)
    p.add_argument("--test-frac", dest="test_frac", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_common(p, data=True, out=True, checkpoint=True, mask=True, split=True)
    p.add_argument("--jobs", type=int)
    p.add_argument("--lpips-checkpoint", dest="lpips_checkpoint",
                   help="model whose encoder backs the perceptual distance")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inpaint", help="write masked and reconstructed PNGs")
    _add_common(p, data=True, out=True, checkpoint=True, mask=True, split=True)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("gradcam", help="export activation-map overlays")
    _add_common(p, data=True, out=True, checkpoint=True, mask=True, split=True)
    p.add_argument("--jobs", type=int)
    p.add_argument("--target", choices=["mse", "mean"])
    p.add_argument("--layer", help="feature map to inspect (depth models)")
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("mask-preview", help="write one mask as a PNG")
    _add_common(p, out=True)
    p.add_argument("--kind", choices=["line", "square"])
    p.add_argument("--index", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.set_defaults(func=cmd_mask_preview)

    p = sub.add_parser("dataset-check", help="validate a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_dataset_check)

    return parser


def main(argv=None) -> int:
    level = {"debug": logging.DEBUG, "info": logging.INFO}.get(
        os.environ.get("DIL_LOG", "info").lower(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
