"""Multi-scale atrous FCN for vessel segmentation.

Layout for the default config (input N x 3 x H x W)::

    multi-scale block   6 atrous 3x3 convs + 3x3 max pool + 3x3 avg pool,
                        concatenated, fused by a 1x1 conv
    encoder stage s     conv3x3 -> conv3x3 -> [1x1 fusion of both] -> conv3x3/2
    decoder stage s     bilinear x2 -> concat encoder features -> conv3x3 x2
    head                1x1 conv to 2 classes, channel softmax

Downsampling is done only by stride-2 convolutions; no pooling layer sits on
the encoder path.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import atomic_write, canonical_json

MAGIC = b"VSLF"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Model configuration is inconsistent."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or disagrees with its config."""


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    encoder_stages: tuple = ((32, 2), (64, 2), (128, 2))
    fusion: bool = True
    atrous_rates: tuple = (1, 2, 4, 6, 8, 12)
    pool_window: int = 3
    msb_branch_channels: int = 16
    msb_out_channels: int = 32
    decoder_stages: tuple = (128, 64, 32)
    skips: bool = True
    n_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "encoder_stages", tuple(tuple(int(v) for v in s) for s in self.encoder_stages))
        object.__setattr__(self, "atrous_rates", tuple(int(r) for r in self.atrous_rates))
        object.__setattr__(self, "decoder_stages", tuple(int(c) for c in self.decoder_stages))
        if not self.encoder_stages:
            raise ConfigError("at least one encoder stage is required")
        if len(self.decoder_stages) != len(self.encoder_stages):
            raise ConfigError(
                f"{len(self.encoder_stages)} encoder stages but {len(self.decoder_stages)} decoder stages"
            )
        if len(self.atrous_rates) != 6:
            raise ConfigError(f"exactly 6 atrous rates required, got {len(self.atrous_rates)}")
        if len(set(self.atrous_rates)) != 6 or min(self.atrous_rates) < 1:
            raise ConfigError(f"atrous rates must be distinct and >= 1, got {self.atrous_rates}")
        for ch, n in self.encoder_stages:
            if ch < 1 or n < 1:
                raise ConfigError(f"bad encoder stage {(ch, n)}")
            if self.fusion and n < 2:
                raise ConfigError("fusion needs at least two convolutions per encoder stage")
        if self.pool_window < 1 or self.pool_window % 2 == 0:
            raise ConfigError(f"pool window must be odd, got {self.pool_window}")
        if self.n_classes != 2:
            raise ConfigError("only 2-class (vessel / background) output is supported")
        if min(self.decoder_stages) < 1 or self.msb_branch_channels < 1 or self.msb_out_channels < 1:
            raise ConfigError("channel counts must be positive")

    @property
    def depth(self) -> int:
        return len(self.encoder_stages)

    @property
    def min_side(self) -> int:
        """Smallest input side the multi-scale block accepts."""
        return 2 * max(self.atrous_rates) + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_stages"] = [list(s) for s in self.encoder_stages]
        d["atrous_rates"] = list(self.atrous_rates)
        d["decoder_stages"] = list(self.decoder_stages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LayerSpec:
    path: str
    kind: str  # conv | maxpool | avgpool | upsample
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 1
    stride: int = 1
    rate: int = 1

    @property
    def conv_spec(self) -> T.ConvSpec:
        k = (self.kernel, self.kernel)
        if self.stride == 1:
            pad = T.same_padding(k, self.rate)
        else:
            # stride 2 halves even sizes exactly
            total = (self.kernel - 1) * self.rate + 1 - self.stride
            pad = (total // 2, total - total // 2, total // 2, total - total // 2)
        return T.ConvSpec(kernel=k, stride=self.stride, rate=self.rate, padding=pad)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_ch, self.in_ch, self.kernel, self.kernel)


def layer_specs(cfg: ModelConfig) -> list[LayerSpec]:
    layers = []
    b = cfg.msb_branch_channels
    for k, r in enumerate(cfg.atrous_rates):
        layers.append(LayerSpec(f"msb.atrous{k}", "conv", cfg.in_channels, b, 3, 1, r))
    layers.append(LayerSpec("msb.maxpool", "maxpool", cfg.in_channels, cfg.in_channels, cfg.pool_window))
    layers.append(LayerSpec("msb.avgpool", "avgpool", cfg.in_channels, cfg.in_channels, cfg.pool_window))
    layers.append(LayerSpec("msb.fuse", "conv", 6 * b + 2 * cfg.in_channels, cfg.msb_out_channels, 1))

    ch_in = cfg.msb_out_channels
    for s, (ch, n) in enumerate(cfg.encoder_stages):
        for j in range(n):
            layers.append(LayerSpec(f"enc{s}.conv{j}", "conv", ch_in if j == 0 else ch, ch, 3))
        if cfg.fusion:
            layers.append(LayerSpec(f"enc{s}.fuse", "conv", 2 * ch, ch, 1))
        layers.append(LayerSpec(f"enc{s}.down", "conv", ch, ch, 3, 2))
        ch_in = ch

    for d, ch in enumerate(cfg.decoder_stages):
        skip = cfg.encoder_stages[cfg.depth - 1 - d][0] if cfg.skips else 0
        layers.append(LayerSpec(f"dec{d}.up", "upsample", ch_in, ch_in, 2))
        layers.append(LayerSpec(f"dec{d}.conv0", "conv", ch_in + skip, ch, 3))
        layers.append(LayerSpec(f"dec{d}.conv1", "conv", ch, ch, 3))
        ch_in = ch
    layers.append(LayerSpec("head", "conv", ch_in, cfg.n_classes, 1))
    return layers


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)  # path -> Tensor

    def arrays(self) -> dict:
        return {k: t.data for k, t in self.tensors.items()}

    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: T.Tensor(t.data.astype(dtype), requires_grad=True) for k, t in self.tensors.items()},
        )

    def weight(self, path: str) -> T.Tensor:
        return self.tensors[f"{path}.w"]

    def bias(self, path: str) -> T.Tensor:
        return self.tensors[f"{path}.b"]


def param_shapes(cfg: ModelConfig) -> dict:
    shapes = {}
    for layer in layer_specs(cfg):
        if layer.kind == "conv":
            shapes[f"{layer.path}.w"] = layer.weight_shape
            shapes[f"{layer.path}.b"] = (layer.out_ch,)
    return shapes


def build(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """He-normal conv weights (fan-in scaling), zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for layer in layer_specs(cfg):
        if layer.kind != "conv":
            continue
        fan_in = layer.in_ch * layer.kernel * layer.kernel
        std = np.sqrt(2.0 / fan_in)
        if layer.path == "head":
            # keeps the initial softmax close to uniform
            std *= 0.1
        w = rng.standard_normal(layer.weight_shape) * std
        tensors[f"{layer.path}.w"] = T.Tensor(w.astype(dtype), requires_grad=True)
        tensors[f"{layer.path}.b"] = T.Tensor(np.zeros(layer.out_ch, dtype=dtype), requires_grad=True)
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------------------
# forward


def _conv(params: ModelParams, layer: LayerSpec, x, relu: bool = True):
    y = T.conv2d(x, params.weight(layer.path), params.bias(layer.path), layer.conv_spec)
    return T.relu(y) if relu else y


def multiscale_block(x, params: ModelParams, rates=None, return_branches: bool = False):
    """Eight parallel same-size branches, concatenated and fused by a 1x1 conv."""
    cfg = params.config
    rates = tuple(cfg.atrous_rates if rates is None else rates)
    if len(rates) != 6:
        raise ConfigError(f"multi-scale block needs 6 rates, got {len(rates)}")
    x = T.as_tensor(x)
    h, w = x.shape[2], x.shape[3]
    need = 2 * max(rates) + 1
    if h < need or w < need:
        raise T.ShapeError(f"input {h}x{w} is smaller than the {need}x{need} extent of atrous rate {max(rates)}")
    branches = []
    for k, r in enumerate(rates):
        layer = LayerSpec(f"msb.atrous{k}", "conv", cfg.in_channels, cfg.msb_branch_channels, 3, 1, r)
        branches.append(_conv(params, layer, x))
    win = cfg.pool_window
    pad = T.same_padding((win, win))
    branches.append(T.pool2d(x, "max", (win, win), 1, pad))
    branches.append(T.pool2d(x, "avg", (win, win), 1, pad))
    fuse = LayerSpec("msb.fuse", "conv", 6 * cfg.msb_branch_channels + 2 * cfg.in_channels, cfg.msb_out_channels, 1)
    out = _conv(params, fuse, T.concat(branches))
    return (out, branches) if return_branches else out


def logits(params: ModelParams, image) -> T.Tensor:
    cfg = params.config
    x = T.as_tensor(image)
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise T.ShapeError(f"expected N x {cfg.in_channels} x H x W input, got {x.shape}")
    if x.data.dtype != next(iter(params.tensors.values())).dtype:
        x = T.Tensor(x.data.astype(next(iter(params.tensors.values())).dtype))
    h, w = x.shape[2], x.shape[3]
    step = 2 ** cfg.depth
    if h % step or w % step:
        raise T.ShapeError(f"input {h}x{w} is not divisible by {step} (2^{cfg.depth} encoder stages)")

    layers = {layer.path: layer for layer in layer_specs(cfg)}
    feat = multiscale_block(x, params)
    skips = []
    for s, (_, n) in enumerate(cfg.encoder_stages):
        outs = []
        for j in range(n):
            feat = _conv(params, layers[f"enc{s}.conv{j}"], feat)
            outs.append(feat)
        if cfg.fusion:
            feat = _conv(params, layers[f"enc{s}.fuse"], T.concat(outs[-2:]))
        skips.append(feat)
        feat = _conv(params, layers[f"enc{s}.down"], feat)

    for d in range(cfg.depth):
        feat = T.upsample_bilinear(feat, 2)
        if cfg.skips:
            feat = T.concat([feat, skips[cfg.depth - 1 - d]])
        feat = _conv(params, layers[f"dec{d}.conv0"], feat)
        feat = _conv(params, layers[f"dec{d}.conv1"], feat)
    return _conv(params, layers["head"], feat, relu=False)


def forward(params: ModelParams, image) -> T.Tensor:
    """Per-pixel class probabilities, N x 2 x H x W (channel 1 = vessel)."""
    return T.softmax_channel(logits(params, image))


def predict_proba(params: ModelParams, image: np.ndarray) -> np.ndarray:
    """Vessel probability without recording lineage."""
    frozen = ModelParams(params.config, {k: T.Tensor(t.data) for k, t in params.tensors.items()})
    return forward(frozen, image).data[:, 1]


# ---------------------------------------------------------------------------
# checkpoints


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_checkpoint(params: ModelParams, trainer: dict | None = None, extra_tensors: dict | None = None) -> bytes:
    header = {"config": params.config.to_dict(), "trainer": trainer}
    records = list(params.arrays().items()) + list((extra_tensors or {}).items())
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), _pack_str(canonical_json(header)), struct.pack("<I", len(records))]
    for path, arr in records:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(_pack_str(path))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes, name: str = "<bytes>"):
    """Returns ``(params, trainer_state, extra_tensors)``."""
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{name}: truncated at byte offset {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{name}: bad magic, not a VSLF checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{name}: unsupported format version {version}")
    (n,) = struct.unpack("<I", take(4))
    header = json.loads(take(n).decode("utf-8"))
    cfg = ModelConfig.from_dict(header["config"])
    expected = param_shapes(cfg)
    (count,) = struct.unpack("<I", take(4))
    tensors, extra = {}, {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        path = take(n).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        if path in expected:
            if tuple(shape) != tuple(expected[path]):
                raise CheckpointError(f"{name}: tensor {path} has shape {shape}, config implies {expected[path]}")
            tensors[path] = T.Tensor(arr, requires_grad=True)
        else:
            extra[path] = arr
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise CheckpointError(f"{name}: missing tensors {missing[:5]}")
    ordered = {k: tensors[k] for k in expected}
    return ModelParams(cfg, ordered), header.get("trainer"), extra


def save_checkpoint(path, params: ModelParams, trainer: dict | None = None, extra_tensors: dict | None = None) -> None:
    atomic_write(path, encode_checkpoint(params, trainer, extra_tensors))


def load_checkpoint(path):
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))
