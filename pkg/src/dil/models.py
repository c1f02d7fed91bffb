"""The three inpainting architectures.

All share one 3-level encoder design (two conv3x3+BN+ReLU per level, then
2x2 max pool) and one decoder design (2x nearest upsample, concat with the
RGB encoder's skip, two conv+BN+ReLU, final 1x1 conv + sigmoid). They
differ only in how the decoder input is produced:

- ``baseline``: the RGB bottleneck goes straight to the decoder.
- ``de-sha``: a sigmoid weight map computed from the concatenated RGB and
  depth bottlenecks modulates the RGB features, then the depth features
  are added.
- ``de-mha``: the concatenated bottlenecks are flattened to tokens and
  fused by 4-head scaled dot-product self-attention, then projected back
  to the decoder width with a 1x1 conv.

Depth models take their skip connections from the RGB encoder only; depth
information enters through the bottleneck fusion.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dil.checkpoint import load_checkpoint, save_checkpoint
from dil.layers import BatchNorm2d, Conv2d, Linear, conv2d, maxpool2, softmax, upsample2
from dil.tensor import (
    Tensor,
    add,
    concat,
    matmul,
    mul,
    no_grad,
    relu,
    reshape,
    scalar_mul,
    sigmoid,
    transpose,
)

MODEL_KINDS = ("baseline", "de-sha", "de-mha")


@dataclass
class ArchConfig:
    levels: int = 3
    base_channels: int = 8
    rgb_in_channels: int = 3
    depth_in_channels: int = 1
    out_channels: int = 3
    mha_heads: int = 4

    @property
    def enc_channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.levels)]

    @property
    def bottleneck_channels(self) -> int:
        return self.enc_channels[-1]


class ConvBlock:
    """Two (conv3x3 -> batchnorm -> ReLU) stages."""

    def __init__(self, in_ch, out_ch, rng, dtype):
        self.conv0 = Conv2d(in_ch, out_ch, 3, rng=rng, dtype=dtype)
        self.bn0 = BatchNorm2d(out_ch, dtype=dtype)
        self.conv1 = Conv2d(out_ch, out_ch, 3, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(out_ch, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = relu(self.bn0(self.conv0(x)))
        return relu(self.bn1(self.conv1(x)))

    def modules(self):
        return [("conv0", self.conv0), ("bn0", self.bn0),
                ("conv1", self.conv1), ("bn1", self.bn1)]


class Encoder:
    """Per level: conv block then 2x2 max pool; returns pre-pool skips and
    the pooled bottleneck."""

    def __init__(self, in_ch: int, cfg: ArchConfig, rng, dtype):
        self.in_ch = in_ch
        self.cfg = cfg
        self.blocks = []
        prev = in_ch
        for ch in cfg.enc_channels:
            self.blocks.append(ConvBlock(prev, ch, rng, dtype))
            prev = ch

    def encode(self, x: Tensor) -> tuple[list[Tensor], Tensor]:
        n, c, h, w = x.data.shape
        if c != self.in_ch:
            raise ValueError(f"encoder expects {self.in_ch} channels, got {c}")
        div = 2**self.cfg.levels
        if h % div or w % div:
            raise ValueError(f"input {h}x{w} not divisible by {div}")
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
            x = maxpool2(x)
        return skips, x

    def modules(self):
        return [(f"level{i}.{n}", m) for i, b in enumerate(self.blocks) for n, m in b.modules()]


class Decoder:
    """Per level: upsample, concat the matching skip, conv block; then a
    1x1 conv to the output channels and a sigmoid."""

    def __init__(self, cfg: ArchConfig, rng, dtype):
        self.cfg = cfg
        self.blocks = []
        chans = list(reversed(cfg.enc_channels))  # e.g. [32, 16, 8]
        prev = cfg.bottleneck_channels
        for i, out_ch in enumerate(chans):
            self.blocks.append(ConvBlock(prev + chans[i], out_ch, rng, dtype))
            prev = out_ch
        self.out = Conv2d(prev, cfg.out_channels, ksize=1, rng=rng, dtype=dtype)

    def decode(self, bottleneck: Tensor, skips: list[Tensor]) -> Tensor:
        if bottleneck.data.shape[1] != self.cfg.bottleneck_channels:
            raise ValueError(
                f"decoder expects {self.cfg.bottleneck_channels}-channel bottleneck, "
                f"got {bottleneck.data.shape[1]}"
            )
        if len(skips) != self.cfg.levels:
            raise ValueError(f"decoder needs {self.cfg.levels} skips, got {len(skips)}")
        x = bottleneck
        for i, block in enumerate(self.blocks):
            x = upsample2(x)
            skip = skips[-1 - i]
            if x.data.shape[2:] != skip.data.shape[2:]:
                raise ValueError(
                    f"skip {len(skips) - 1 - i} is {skip.data.shape}, "
                    f"decoder level {i} produced {x.data.shape}"
                )
            x = concat([x, skip], axis=1)
            x = block(x)
        return sigmoid(conv2d(x, self.out))

    def modules(self):
        mods = [(f"level{i}.{n}", m) for i, b in enumerate(self.blocks) for n, m in b.modules()]
        mods.append(("out", self.out))
        return mods


class SimpleAttentionFusion:
    """Sigmoid weight map over the RGB bottleneck, computed from both
    bottlenecks; output = rgb * map + depth."""

    def __init__(self, cfg: ArchConfig, rng, dtype):
        ch = cfg.bottleneck_channels
        self.conv1 = Conv2d(2 * ch, ch, 3, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(ch, ch, 3, rng=rng, dtype=dtype)

    def __call__(self, x_rgb: Tensor, x_depth: Tensor) -> tuple[Tensor, Tensor]:
        if x_rgb.data.shape != x_depth.data.shape:
            raise ValueError(
                f"fusion inputs differ: {x_rgb.data.shape} vs {x_depth.data.shape}"
            )
        amap = sigmoid(self.conv2(relu(self.conv1(concat([x_rgb, x_depth], axis=1)))))
        return add(mul(x_rgb, amap), x_depth), amap

    def modules(self):
        return [("conv1", self.conv1), ("conv2", self.conv2)]


class MultiHeadFusion:
    """Multi-head self-attention over the concatenated bottleneck tokens.

    Tokens are the h*w spatial positions with the 2*ch channel vector as
    features; no positional encoding, so the fusion is equivariant under
    spatial permutation of the tokens.
    """

    def __init__(self, cfg: ArchConfig, rng, dtype):
        ch = cfg.bottleneck_channels
        self.d_model = 2 * ch
        self.heads = cfg.mha_heads
        if self.d_model % self.heads:
            raise ValueError(f"{self.d_model} channels not divisible by {self.heads} heads")
        self.d_k = self.d_model // self.heads
        self.wq = Linear(self.d_model, self.d_model, bias=False, rng=rng, dtype=dtype)
        self.wk = Linear(self.d_model, self.d_model, bias=False, rng=rng, dtype=dtype)
        self.wv = Linear(self.d_model, self.d_model, bias=False, rng=rng, dtype=dtype)
        self.wo = Linear(self.d_model, self.d_model, bias=False, rng=rng, dtype=dtype)
        self.proj = Conv2d(self.d_model, ch, ksize=1, rng=rng, dtype=dtype)

    def _split_heads(self, x: Tensor, n: int, t: int) -> Tensor:
        return transpose(reshape(x, (n, t, self.heads, self.d_k)), (0, 2, 1, 3))

    def __call__(self, x_rgb: Tensor, x_depth: Tensor) -> tuple[Tensor, Tensor]:
        if x_rgb.data.shape != x_depth.data.shape:
            raise ValueError(
                f"fusion inputs differ: {x_rgb.data.shape} vs {x_depth.data.shape}"
            )
        cat = concat([x_rgb, x_depth], axis=1)
        n, c, h, w = cat.data.shape
        t = h * w
        tokens = transpose(reshape(cat, (n, c, t)), (0, 2, 1))  # (N, T, C)
        q = self._split_heads(self.wq(tokens), n, t)
        k = self._split_heads(self.wk(tokens), n, t)
        v = self._split_heads(self.wv(tokens), n, t)
        scores = scalar_mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.d_k))
        attn = softmax(scores, axis=-1)  # (N, heads, T, T), rows sum to 1
        heads_out = matmul(attn, v)
        merged = reshape(transpose(heads_out, (0, 2, 1, 3)), (n, t, c))
        out_tokens = self.wo(merged)
        fmap = reshape(transpose(out_tokens, (0, 2, 1)), (n, c, h, w))
        return conv2d(fmap, self.proj), attn

    def modules(self):
        return [("wq", self.wq), ("wk", self.wk), ("wv", self.wv),
                ("wo", self.wo), ("proj", self.proj)]


class Model:
    """Common surface of the three architectures."""

    kind: str

    def __init__(self, cfg: ArchConfig):
        self.cfg = cfg

    # -- module tree -------------------------------------------------------

    def modules(self):
        raise NotImplementedError

    def named_parameters(self):
        for prefix, mod in self.modules():
            for name, p in mod.named_parameters():
                yield f"{prefix}.{name}", p

    def named_buffers(self):
        for prefix, mod in self.modules():
            for name, b in mod.named_buffers():
                yield f"{prefix}.{name}", b

    @property
    def parameter_count(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())

    def set_training(self, flag: bool) -> None:
        for _, mod in self.modules():
            if isinstance(mod, BatchNorm2d):
                mod.training = flag

    # -- forward -----------------------------------------------------------

    def forward(self, rgb: Tensor, depth: Tensor | None = None,
                training: bool = False) -> Tensor:
        out, _ = self.forward_with_features(rgb, depth, training)
        return out

    def forward_with_features(self, rgb, depth, training):
        raise NotImplementedError

    def predict(self, rgb: np.ndarray, depth: np.ndarray | None = None) -> np.ndarray:
        """Evaluation-mode forward on raw arrays; returns the inpainted image."""
        squeeze = rgb.ndim == 3
        if squeeze:
            rgb = rgb[None]
            depth = depth[None] if depth is not None else None
        with no_grad():
            out = self.forward(
                Tensor(np.ascontiguousarray(rgb, dtype=np.float32)),
                Tensor(np.ascontiguousarray(depth, dtype=np.float32))
                if depth is not None else None,
                training=False,
            ).data
        return out[0] if squeeze else out

    # -- persistence -------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        entries: dict[str, np.ndarray] = {}
        for name, p in self.named_parameters():
            entries[name] = p.data
        for name, b in self.named_buffers():
            entries[name] = b
        return entries

    def load_state_dict(self, entries: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        got = set(entries)
        if expected != got:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            arr = entries[name].astype(p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data[...] = arr
        for name, b in buffers.items():
            arr = entries[name].astype(b.dtype)
            if arr.shape != b.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {b.shape}")
            b[...] = arr

    def manifest_line(self) -> str:
        c = self.cfg
        return (
            f"arch={self.kind} levels={c.levels} base_channels={c.base_channels} "
            f"rgb_in={c.rgb_in_channels} depth_in={c.depth_in_channels} "
            f"out={c.out_channels} heads={c.mha_heads} params={self.parameter_count}"
        )


class BaselineModel(Model):
    """RGB-only encoder-decoder with skip connections; no attention."""

    kind = "baseline"

    def __init__(self, cfg: ArchConfig, rng, dtype):
        super().__init__(cfg)
        self.rgb_encoder = Encoder(cfg.rgb_in_channels, cfg, rng, dtype)
        self.decoder = Decoder(cfg, rng, dtype)

    def modules(self):
        return (
            [(f"rgb_encoder.{n}", m) for n, m in self.rgb_encoder.modules()]
            + [(f"decoder.{n}", m) for n, m in self.decoder.modules()]
        )

    def forward_with_features(self, rgb, depth=None, training=False):
        self.set_training(training)
        skips, bottleneck = self.rgb_encoder.encode(rgb)
        out = self.decoder.decode(bottleneck, skips)
        feats = {"rgb_skips": skips, "bottleneck": bottleneck, "fused": bottleneck,
                 "cam_layer": "bottleneck"}
        return out, feats


class _DepthModel(Model):
    """Shared plumbing of the two depth-enhanced models."""

    def __init__(self, cfg: ArchConfig, rng, dtype):
        super().__init__(cfg)
        self.rgb_encoder = Encoder(cfg.rgb_in_channels, cfg, rng, dtype)
        self.depth_encoder = Encoder(cfg.depth_in_channels, cfg, rng, dtype)
        self.fusion = None  # set by subclass
        self.decoder = Decoder(cfg, rng, dtype)

    def modules(self):
        return (
            [(f"rgb_encoder.{n}", m) for n, m in self.rgb_encoder.modules()]
            + [(f"depth_encoder.{n}", m) for n, m in self.depth_encoder.modules()]
            + [(f"fusion.{n}", m) for n, m in self.fusion.modules()]
            + [(f"decoder.{n}", m) for n, m in self.decoder.modules()]
        )

    def forward_with_features(self, rgb, depth, training=False):
        if depth is None:
            raise ValueError(f"{self.kind} requires a depth input")
        if rgb.data.shape[2:] != depth.data.shape[2:]:
            raise ValueError(
                f"rgb {rgb.data.shape} and depth {depth.data.shape} spatial dims differ"
            )
        self.set_training(training)
        skips, rgb_bottleneck = self.rgb_encoder.encode(rgb)
        _, depth_bottleneck = self.depth_encoder.encode(depth)
        fused, attn = self.fusion(rgb_bottleneck, depth_bottleneck)
        out = self.decoder.decode(fused, skips)
        feats = {
            "rgb_skips": skips,
            "bottleneck": rgb_bottleneck,
            "depth_bottleneck": depth_bottleneck,
            "fused": fused,
            "attention": attn,
            "cam_layer": "fused",
        }
        return out, feats


class DeShaModel(_DepthModel):
    """Depth-enhanced single-head (sigmoid map) attention fusion."""

    kind = "de-sha"

    def __init__(self, cfg: ArchConfig, rng, dtype):
        super().__init__(cfg, rng, dtype)
        self.fusion = SimpleAttentionFusion(cfg, rng, dtype)


class DeMhaModel(_DepthModel):
    """Depth-enhanced multi-head attention fusion."""

    kind = "de-mha"

    def __init__(self, cfg: ArchConfig, rng, dtype):
        super().__init__(cfg, rng, dtype)
        self.fusion = MultiHeadFusion(cfg, rng, dtype)


_CLASSES = {"baseline": BaselineModel, "de-sha": DeShaModel, "de-mha": DeMhaModel}


def build_model(kind: str, cfg: ArchConfig | None = None, init_seed: int = 0,
                dtype=np.float32) -> Model:
    if kind not in _CLASSES:
        raise ValueError(f"unknown model kind {kind!r}, expected one of {MODEL_KINDS}")
    cfg = cfg if cfg is not None else ArchConfig()
    rng = np.random.default_rng([init_seed, 0x1417])
    return _CLASSES[kind](cfg, rng, dtype)


def save_model(model: Model, path) -> None:
    """Write the parameter container plus a one-line sidecar manifest."""
    save_checkpoint(path, model.state_dict())
    Path(f"{path}.manifest").write_text(model.manifest_line() + "\n")


def load_model(path) -> Model:
    manifest_path = Path(f"{path}.manifest")
    if not manifest_path.exists():
        raise FileNotFoundError(f"model manifest not found: {manifest_path}")
    fields = dict(kv.split("=", 1) for kv in manifest_path.read_text().split())
    cfg = ArchConfig(
        levels=int(fields["levels"]),
        base_channels=int(fields["base_channels"]),
        rgb_in_channels=int(fields["rgb_in"]),
        depth_in_channels=int(fields["depth_in"]),
        out_channels=int(fields["out"]),
        mha_heads=int(fields["heads"]),
    )
    model = build_model(fields["arch"], cfg)
    model.load_state_dict(load_checkpoint(path))
    if model.parameter_count != int(fields["params"]):
        raise ValueError(
            f"manifest says {fields['params']} parameters, model has {model.parameter_count}"
        )
    return model
