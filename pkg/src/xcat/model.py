"""The XCAT network: layer plan, forward pass, accounting and weight files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .config import (
    BLOCK_KINDS,
    MERGE_MODES,
    MIX_MODES,
    POST_BLOCK_CONVS,
    ROTATE_DIRECTIONS,
    XcatConfig,
)
from .ops import ConvWeights, clipped_relu, conv2d, depth_to_space, relu
from .tensor import channel_concat, channel_rotate, channel_split, check_tensor

TAGS = {
    "conv_in": 1,
    "branch0": 2,
    "branch1": 3,
    "mix": 4,
    "conv": 5,
    "post": 6,
    "conv_out": 7,
    "upsample": 8,
}
BLOCK_TAGS = {TAGS["branch0"], TAGS["branch1"], TAGS["mix"], TAGS["conv"]}
_TAG_NAMES = {v: k for k, v in TAGS.items()}


class WeightFormatError(ValueError):
    """Malformed weight file. ``layer`` is the record index when known."""

    def __init__(self, msg: str, layer: int | None = None):
        if layer is not None:
            msg = f"layer {layer}: {msg}"
        super().__init__(msg)
        self.layer = layer


class ConfigError(WeightFormatError):
    """Weight file whose declared config disagrees with its layer records."""

    def __init__(self, fieldname: str, msg: str):
        super().__init__(f"config field {fieldname!r}: {msg}")
        self.field = fieldname


class LayerSpec(NamedTuple):
    name: str
    tag: int
    out_channels: int
    in_channels: int
    kh: int
    kw: int
    trainable: bool

    @property
    def weight_count(self) -> int:
        return self.out_channels * self.in_channels * self.kh * self.kw

    @property
    def param_count(self) -> int:
        return self.weight_count + (self.out_channels if self.trainable else 0)


def layer_plan(cfg: XcatConfig) -> list[LayerSpec]:
    """Every convolution of the network, in execution order."""
    f = cfg.feature_channels
    img = cfg.image_channels
    up = cfg.out_channels_before_d2s
    plan = [LayerSpec("conv_in", TAGS["conv_in"], f, img, 3, 3, True)]
    for b in range(cfg.m):
        if cfg.block_kind == "hxblock":
            for k, (c, ks) in enumerate(zip(cfg.split, cfg.branch_kernels)):
                plan.append(LayerSpec(f"block{b}.branch{k}", TAGS[f"branch{k}"], c, c, ks, ks, True))
            if cfg.mix_mode == "conv1x1":
                plan.append(LayerSpec(f"block{b}.mix", TAGS["mix"], f, f, 1, 1, True))
        else:
            plan.append(LayerSpec(f"block{b}.conv", TAGS["conv"], f, f, 3, 3, True))
    if cfg.post_block_conv != "none":
        k = 3 if cfg.post_block_conv == "conv3x3" else 1
        plan.append(LayerSpec("post", TAGS["post"], f, f, k, k, True))
    out_in = f if cfg.merge_mode == "add" else f + up
    plan.append(LayerSpec("conv_out", TAGS["conv_out"], up, out_in, 3, 3, True))
    plan.append(LayerSpec("upsample", TAGS["upsample"], up, img, 1, 1, False))
    return plan


def make_fixed_upsample_kernel(image_channels: int = 3, scale: int = 3, dtype=np.float32) -> ConvWeights:
    """1x1 kernel that copies each image channel ``scale**2`` times.

    Output channel ``o`` reads input channel ``o % image_channels``, which is
    the order :func:`depth_to_space` expects for nearest-neighbour upsampling.
    """
    if image_channels < 1 or scale < 1:
        raise ValueError("image_channels and scale must be >= 1")
    out = image_channels * scale * scale
    kernel = np.zeros((out, image_channels, 1, 1), dtype=dtype)
    kernel[np.arange(out), np.arange(out) % image_channels, 0, 0] = 1
    return ConvWeights(kernel, np.zeros(out, dtype=dtype), trainable=False)


@dataclass
class Model:
    config: XcatConfig
    layers: dict[str, ConvWeights] = field(default_factory=dict)

    def trainable(self) -> dict[str, ConvWeights]:
        return {k: w for k, w in self.layers.items() if w.trainable}

    def copy(self) -> "Model":
        return Model(self.config, {k: w.copy() for k, w in self.layers.items()})

    def astype(self, dtype) -> "Model":
        return Model(
            self.config,
            {
                k: ConvWeights(w.kernel.astype(dtype), w.bias.astype(dtype), w.trainable)
                for k, w in self.layers.items()
            },
        )

    @property
    def dtype(self):
        return self.layers["conv_in"].kernel.dtype


def build(config: XcatConfig, rng_seed: int = 0, dtype=np.float32, zero_init_output: bool = True) -> Model:
    """Instantiate a model with seeded He-uniform kernels and zero biases.

    With ``zero_init_output`` the add-mode output convolution starts at zero,
    so an untrained network is exactly nearest-neighbour upsampling.
    """
    config.validate()
    rng = np.random.default_rng(rng_seed)
    layers = {}
    for spec in layer_plan(config):
        if not spec.trainable:
            layers[spec.name] = make_fixed_upsample_kernel(config.image_channels, config.scale, dtype)
            continue
        fan_in = spec.in_channels * spec.kh * spec.kw
        bound = np.sqrt(6.0 / fan_in)
        kernel = rng.uniform(-bound, bound, (spec.out_channels, spec.in_channels, spec.kh, spec.kw))
        if zero_init_output and spec.name == "conv_out" and config.merge_mode == "add":
            kernel[:] = 0
        layers[spec.name] = ConvWeights(kernel.astype(dtype), np.zeros(spec.out_channels, dtype), True)
    return Model(config, layers)


def edge_names(cfg: XcatConfig) -> list[str]:
    """Activation edges in execution order; each gets one set of quantization parameters."""
    names = ["input", "conv_in"]
    for b in range(cfg.m):
        if cfg.block_kind == "hxblock":
            names.append(f"block{b}.cat")
        names.append(f"block{b}")
    if cfg.post_block_conv != "none":
        names.append("post")
    names.append("upsample")
    if cfg.merge_mode == "add":
        names += ["conv_out", "merge"]
    else:
        names += ["merge", "conv_out"]
    names.append("output")
    return names


def forward_with_cache(model: Model, lr: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Run the network and keep every intermediate needed for backprop and calibration.

    Cache keys are the edge names of :func:`edge_names` plus ``<layer>.in``
    (convolution input) and ``<layer>.pre`` (pre-activation output).
    """
    cfg = model.config
    lr = check_tensor(lr, "lr")
    if lr.shape[-1] != cfg.image_channels:
        raise ValueError(f"input has {lr.shape[-1]} channels, model expects {cfg.image_channels}")
    L = model.layers
    act = relu if cfg.hidden_relu else (lambda t: t)
    cache: dict[str, np.ndarray] = {"input": lr}

    def conv(name, x):
        cache[f"{name}.in"] = x
        y = conv2d(x, L[name])
        cache[f"{name}.pre"] = y
        return y

    h = act(conv("conv_in", lr))
    cache["conv_in"] = h
    for b in range(cfg.m):
        if cfg.block_kind == "hxblock":
            parts = channel_split(h, cfg.split)
            outs = [act(conv(f"block{b}.branch{k}", p)) for k, p in enumerate(parts)]
            cat = channel_concat(outs)
            cache[f"block{b}.cat"] = cat
            if cfg.mix_mode == "cross_concat":
                h = channel_rotate(cat, cfg.rotation)
            elif cfg.mix_mode == "straight_concat":
                h = cat
            else:
                h = conv(f"block{b}.mix", cat)
        else:
            h = act(conv(f"block{b}.conv", h))
        cache[f"block{b}"] = h
    if cfg.post_block_conv != "none":
        h = conv("post", h)
        cache["post"] = h
    up = conv("upsample", lr)
    cache["upsample"] = up
    if cfg.merge_mode == "add":
        feat = conv("conv_out", h)
        cache["conv_out"] = feat
        merged = feat + up
        cache["merge"] = merged
        pre = merged
    else:
        merged = channel_concat([h, up])
        cache["merge"] = merged
        pre = conv("conv_out", merged)
        cache["conv_out"] = pre
    cache["d2s"] = depth_to_space(pre, cfg.scale)
    out = clipped_relu(cache["d2s"], 0.0, 1.0)
    cache["output"] = out
    return out, cache


def forward(model: Model, lr: np.ndarray) -> np.ndarray:
    """Super-resolve ``lr`` (values in [0, 1]); output is ``scale`` times larger, clipped to [0, 1]."""
    return forward_with_cache(model, lr)[0]


def param_count(model: Model) -> tuple[int, int]:
    """(trainable, fixed) parameter counts from the actual arrays, biases included.

    The fixed count covers kernels only; a non-trainable layer's all-zero bias
    is not a parameter.
    """
    trainable = fixed = 0
    for w in model.layers.values():
        if w.trainable:
            trainable += w.kernel.size + w.bias.size
        else:
            fixed += w.kernel.size
    return trainable, fixed


def param_count_formula(cfg: XcatConfig) -> tuple[int, int]:
    plan = layer_plan(cfg)
    return (
        sum(s.param_count for s in plan if s.trainable),
        sum(s.weight_count for s in plan if not s.trainable),
    )


def mac_count(cfg: XcatConfig, h: int, w: int) -> int:
    """Multiply-accumulates for one forward pass at LR size ``h`` x ``w``.

    Rotation, concatenation, addition and depth-to-space are free.
    """
    return h * w * sum(s.weight_count for s in layer_plan(cfg))


def block_macs_per_pixel(cfg: XcatConfig) -> int:
    """MACs per pixel of one block (branch convolutions plus any 1x1 mixing)."""
    return sum(s.weight_count for s in layer_plan(cfg) if s.name.startswith("block0."))


# -- weight files -----------------------------------------------------------

WEIGHT_MAGIC = b"HXSR"
QUANT_MAGIC = b"HXQ8"
FORMAT_VERSION = 1
_CONFIG_FMT = "<13I"
_RECORD_HEAD = "<B4I"


def pack_config(cfg: XcatConfig) -> bytes:
    return struct.pack(
        _CONFIG_FMT,
        cfg.m,
        cfg.split[0],
        cfg.split[1],
        cfg.branch_kernels[0],
        cfg.branch_kernels[1],
        MIX_MODES.index(cfg.mix_mode),
        ROTATE_DIRECTIONS.index(cfg.rotate_direction),
        BLOCK_KINDS.index(cfg.block_kind),
        POST_BLOCK_CONVS.index(cfg.post_block_conv),
        MERGE_MODES.index(cfg.merge_mode),
        cfg.scale,
        cfg.image_channels,
        int(cfg.hidden_relu),
    )


def unpack_config(values: tuple[int, ...]) -> XcatConfig:
    (m, sx, sy, k0, k1, mix, rot, kind, post, merge, scale, img, hid) = values
    enums = [
        ("mix_mode", MIX_MODES, mix),
        ("rotate_direction", ROTATE_DIRECTIONS, rot),
        ("block_kind", BLOCK_KINDS, kind),
        ("post_block_conv", POST_BLOCK_CONVS, post),
        ("merge_mode", MERGE_MODES, merge),
    ]
    decoded = {}
    for name, choices, idx in enums:
        if idx >= len(choices):
            raise ConfigError(name, f"enum value {idx} out of range")
        decoded[name] = choices[idx]
    try:
        return XcatConfig(
            m=m, split=(sx, sy), branch_kernels=(k0, k1), scale=scale,
            image_channels=img, hidden_relu=bool(hid), **decoded,
        )
    except ValueError as e:
        raise WeightFormatError(f"invalid config block: {e}") from None


class Reader:
    """Bounds-checked little-endian cursor over a byte string."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.layer: int | None = None

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightFormatError(
                f"file truncated: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}",
                self.layer,
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(np.dtype(dtype).newbyteorder("="))


def read_header(r: Reader, magic: bytes) -> tuple[XcatConfig, int]:
    got = r.take(4)
    if got != magic:
        raise WeightFormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported format version {version}")
    cfg = unpack_config(r.unpack(_CONFIG_FMT))
    (count,) = r.unpack("<I")
    return cfg, count


def check_records(cfg: XcatConfig, heads: list[tuple[int, int, int, int, int]]) -> list[LayerSpec]:
    """Match parsed record headers ``(tag, out, in, kh, kw)`` against the config's layer plan."""
    plan = layer_plan(cfg)
    n_block = sum(1 for h in heads if h[0] in BLOCK_TAGS)
    want_block = sum(1 for s in plan if s.tag in BLOCK_TAGS)
    if n_block != want_block:
        raise ConfigError("m", f"declares {cfg.m} blocks ({want_block} block layers) but file has {n_block}")
    if len(heads) != len(plan):
        raise WeightFormatError(f"file has {len(heads)} layers, config needs {len(plan)}")
    for i, (spec, head) in enumerate(zip(plan, heads)):
        want = (spec.tag, spec.out_channels, spec.in_channels, spec.kh, spec.kw)
        if tuple(head) != want:
            raise WeightFormatError(
                f"record {_TAG_NAMES.get(head[0], head[0])} {head[1:]} does not match {spec.name} {want[1:]}", i
            )
    return plan


def save_weights(model: Model, path) -> None:
    plan = layer_plan(model.config)
    buf = [WEIGHT_MAGIC, struct.pack("<I", FORMAT_VERSION), pack_config(model.config), struct.pack("<I", len(plan))]
    for spec in plan:
        w = model.layers[spec.name]
        buf.append(struct.pack(_RECORD_HEAD, spec.tag, spec.out_channels, spec.in_channels, spec.kh, spec.kw))
        buf.append(np.ascontiguousarray(w.kernel, dtype="<f4").tobytes())
        buf.append(np.ascontiguousarray(w.bias, dtype="<f4").tobytes())
        buf.append(struct.pack("<B", int(w.trainable)))
    Path(path).write_bytes(b"".join(buf))


def load_weights(path) -> Model:
    r = Reader(Path(path).read_bytes())
    cfg, count = read_header(r, WEIGHT_MAGIC)
    heads, arrays = [], []
    for i in range(count):
        r.layer = i
        head = r.unpack(_RECORD_HEAD)
        tag, o, c, kh, kw = head
        if tag not in _TAG_NAMES:
            raise WeightFormatError(f"unknown layer tag {tag}", i)
        kernel = r.array(np.float32, o * c * kh * kw).reshape(o, c, kh, kw)
        bias = r.array(np.float32, o)
        (trainable,) = r.unpack("<B")
        heads.append(head)
        arrays.append((kernel, bias, bool(trainable)))
    r.layer = None
    if r.pos != len(r.data):
        raise WeightFormatError(f"{len(r.data) - r.pos} trailing bytes after last layer")
    plan = check_records(cfg, heads)
    layers = {}
    for i, (spec, (kernel, bias, trainable)) in enumerate(zip(plan, arrays)):
        if trainable != spec.trainable:
            raise WeightFormatError(f"trainable flag {trainable} for {spec.name}", i)
        try:
            layers[spec.name] = ConvWeights(kernel, bias, trainable)
        except ValueError as e:
            raise WeightFormatError(str(e), i) from None
    return Model(cfg, layers)
