"""Full-integer UINT8 post-training quantization.

Activations and weights use per-tensor affine parameters. Convolutions
accumulate ``(q_x - z_x) * (q_w - z_w)`` in integers, add an int32 bias and
requantize with a double-precision multiplier. Split, concatenation,
rotation and depth-to-space move bytes only.

Two edges are pinned rather than calibrated: ``input``/``upsample`` use
``(1/255, 0)`` so the fixed copy kernel is exact, and the edge feeding
depth-to-space uses the output parameters ``(1/255, 0)`` with the final
clipped ReLU fused into its clamp.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import InfinitePSNR, psnr
from .model import (
    FORMAT_VERSION,
    QUANT_MAGIC,
    Model,
    Reader,
    WeightFormatError,
    _RECORD_HEAD,
    check_records,
    edge_names,
    forward_with_cache,
    layer_plan,
    pack_config,
    read_header,
)
from .ops import depth_to_space, im2col
from .tensor import channel_concat, channel_rotate, channel_split, check_tensor

log = logging.getLogger(__name__)

QMIN, QMAX = 0, 255
INT32_MIN, INT32_MAX = -(2 ** 31), 2 ** 31 - 1


def round_half_away(x):
    """Round to nearest, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not QMIN <= self.zero_point <= QMAX:
            raise ValueError(f"zero_point {self.zero_point} outside [{QMIN}, {QMAX}]")

    @classmethod
    def from_range(cls, lo: float, hi: float) -> "QuantParams":
        """Affine parameters covering ``[lo, hi]`` widened to include zero.

        A degenerate range gets scale 1/255 with the zero point placed so the
        constant is represented exactly.
        """
        lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
        if hi == lo:
            return cls(1.0 / 255.0, 0)
        scale = (hi - lo) / (QMAX - QMIN)
        zp = int(np.clip(round_half_away(QMIN - lo / scale), QMIN, QMAX))
        return cls(scale, zp)


UNIT = QuantParams(1.0 / 255.0, 0)


def quantize(r, p: QuantParams) -> np.ndarray:
    q = round_half_away(np.asarray(r, dtype=np.float64) / p.scale) + p.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.uint8)


def dequantize(q, p: QuantParams) -> np.ndarray:
    return (np.asarray(q, dtype=np.float64) - p.zero_point) * p.scale


def quantize_value(r: float, p: QuantParams) -> int:
    return int(quantize(r, p))


def dequantize_value(q: int, p: QuantParams) -> float:
    return float(dequantize(q, p))


def requantize(acc, multiplier: float, zero_point: int, lo: int = QMIN, hi: int = QMAX) -> np.ndarray:
    """``clamp(round(acc * multiplier) + zero_point, lo, hi)`` as uint8."""
    q = round_half_away(np.asarray(acc, dtype=np.float64) * multiplier) + zero_point
    return np.clip(q, lo, hi).astype(np.uint8)


# -- calibration --------------------------------------------------------------

@dataclass
class CalibrationRecord:
    """Running (min, max) per activation edge."""

    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)

    def observe(self, name: str, t: np.ndarray) -> None:
        lo, hi = float(np.min(t)), float(np.max(t))
        if name in self.ranges:
            plo, phi = self.ranges[name]
            lo, hi = min(lo, plo), max(hi, phi)
        self.ranges[name] = (lo, hi)

    def merge(self, other: "CalibrationRecord") -> "CalibrationRecord":
        out = CalibrationRecord(dict(self.ranges))
        for name, (lo, hi) in other.ranges.items():
            out.observe(name, np.array([lo, hi]))
        return out

    def widened(self, name: str) -> tuple[float, float]:
        lo, hi = self.ranges[name]
        return min(lo, 0.0), max(hi, 0.0)


def calibrate(model: Model, images: Sequence[np.ndarray]) -> CalibrationRecord:
    """Observe every activation edge of the float model over ``images``."""
    if len(images) == 0:
        raise ValueError("calibration needs at least one image")
    rec = CalibrationRecord()
    names = edge_names(model.config)
    for img in images:
        img = np.asarray(img)
        if img.ndim == 3:
            img = img[None]
        _, cache = forward_with_cache(model, img)
        for name in names:
            rec.observe(name, cache[name])
    return rec


# -- quantized model --------------------------------------------------------------

@dataclass
class QConv:
    kernel: np.ndarray  # uint8 (out, in, kh, kw)
    wparams: QuantParams
    bias: np.ndarray  # int32, scale = input_scale * weight_scale
    trainable: bool = True

    @property
    def ksize(self) -> tuple[int, int]:
        return self.kernel.shape[2], self.kernel.shape[3]


@dataclass
class QModel:
    config: object
    layers: dict[str, QConv]
    edges: dict[str, QuantParams]


def quantize_weights(kernel: np.ndarray, trainable: bool = True, symmetric: bool = False) -> tuple[np.ndarray, QuantParams]:
    """Per-tensor uint8 weights. Non-trainable kernels hold small integers and use scale 1."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if not trainable and np.all(kernel == np.round(kernel)) and kernel.min() >= 0 and kernel.max() <= QMAX:
        p = QuantParams(1.0, 0)
    elif symmetric:
        amax = float(np.max(np.abs(kernel)))
        p = QuantParams(amax / 127.0 if amax > 0 else 1.0 / 255.0, 128)
    else:
        p = QuantParams.from_range(kernel.min(), kernel.max())
    return quantize(kernel, p), p


def _input_edge_of(cfg) -> dict[str, str]:
    """Edge whose parameters each convolution reads."""
    src = {"conv_in": "input", "upsample": "input"}
    prev = "conv_in"
    for b in range(cfg.m):
        if cfg.block_kind == "hxblock":
            src[f"block{b}.branch0"] = prev
            src[f"block{b}.branch1"] = prev
            if cfg.mix_mode == "conv1x1":
                src[f"block{b}.mix"] = f"block{b}.cat"
        else:
            src[f"block{b}.conv"] = prev
        prev = f"block{b}"
    if cfg.post_block_conv != "none":
        src["post"] = prev
        prev = "post"
    src["conv_out"] = prev if cfg.merge_mode == "add" else "merge"
    return src


def _output_edge_of(cfg) -> dict[str, str]:
    dst = {"conv_in": "conv_in", "upsample": "upsample", "post": "post", "conv_out": "conv_out"}
    for b in range(cfg.m):
        if cfg.block_kind == "hxblock":
            dst[f"block{b}.branch0"] = f"block{b}.cat"
            dst[f"block{b}.branch1"] = f"block{b}.cat"
            dst[f"block{b}.mix"] = f"block{b}"
        else:
            dst[f"block{b}.conv"] = f"block{b}"
    return dst


def quantize_model(model: Model, cal: CalibrationRecord, symmetric_weights: bool = False) -> QModel:
    cfg = model.config
    names = edge_names(cfg)
    missing = [n for n in names if n not in cal.ranges]
    if missing:
        raise ValueError(f"calibration record lacks edges {missing}")
    edges = {}
    for name in names:
        edges[name] = QuantParams.from_range(*cal.widened(name))
    edges["input"] = UNIT
    edges["upsample"] = UNIT
    edges["output"] = UNIT
    # clipped ReLU is fused into whichever op feeds depth-to-space
    edges["merge" if cfg.merge_mode == "add" else "conv_out"] = UNIT
    src = _input_edge_of(cfg)
    layers = {}
    for spec in layer_plan(cfg):
        w = model.layers[spec.name]
        qk, wp = quantize_weights(w.kernel, w.trainable, symmetric_weights)
        bias_scale = edges[src[spec.name]].scale * wp.scale
        qb = np.clip(round_half_away(np.asarray(w.bias, np.float64) / bias_scale), INT32_MIN, INT32_MAX)
        layers[spec.name] = QConv(qk, wp, qb.astype(np.int32), w.trainable)
    return QModel(cfg, layers, edges)


def qconv(q: np.ndarray, pin: QuantParams, layer: QConv, pout: QuantParams, relu: bool = False) -> np.ndarray:
    """Integer convolution with zero-point correction and requantization."""
    n, h, w, _ = q.shape
    kh, kw = layer.ksize
    xc = q.astype(np.int32) - pin.zero_point
    wc = layer.kernel.astype(np.int32) - layer.wparams.zero_point
    cols = im2col(xc, kh, kw)
    # |products| <= 255*255 and at most a few hundred taps, so float64 sums are exact integers
    acc = (cols.astype(np.float64) @ wc.reshape(wc.shape[0], -1).T.astype(np.float64)).astype(np.int64)
    acc += layer.bias
    m = pin.scale * layer.wparams.scale / pout.scale
    lo = pout.zero_point if relu else QMIN
    return requantize(acc, m, pout.zero_point, lo).reshape(n, h, w, -1)


def qadd(a: np.ndarray, pa: QuantParams, b: np.ndarray, pb: QuantParams, pout: QuantParams) -> np.ndarray:
    total = (a.astype(np.float64) - pa.zero_point) * (pa.scale / pout.scale)
    total += (b.astype(np.float64) - pb.zero_point) * (pb.scale / pout.scale)
    return requantize(total, 1.0, pout.zero_point)


def qrescale(q: np.ndarray, pin: QuantParams, pout: QuantParams) -> np.ndarray:
    if pin == pout:
        return q
    return requantize(q.astype(np.int64) - pin.zero_point, pin.scale / pout.scale, pout.zero_point)


def qforward(qm: QModel, lr: np.ndarray) -> np.ndarray:
    """Integer-only inference on a uint8 image with parameters ``(1/255, 0)``."""
    cfg = qm.config
    lr = check_tensor(lr, "lr")
    if lr.dtype != np.uint8:
        raise ValueError(f"qforward expects uint8 input, got {lr.dtype}")
    if lr.shape[-1] != cfg.image_channels:
        raise ValueError(f"input has {lr.shape[-1]} channels, model expects {cfg.image_channels}")
    missing = [n for n in edge_names(cfg) if n not in qm.edges]
    if missing:
        raise RuntimeError(f"quantized model is missing parameters for edges {missing}")
    E, L = qm.edges, qm.layers
    relu = cfg.hidden_relu

    h = qconv(lr, E["input"], L["conv_in"], E["conv_in"], relu)
    prev = "conv_in"
    for b in range(cfg.m):
        if cfg.block_kind == "hxblock":
            cat_p = E[f"block{b}.cat"]
            parts = channel_split(h, cfg.split)
            outs = [qconv(p, E[prev], L[f"block{b}.branch{k}"], cat_p, relu) for k, p in enumerate(parts)]
            cat = channel_concat(outs)
            if cfg.mix_mode == "cross_concat":
                h = channel_rotate(cat, cfg.rotation)
            elif cfg.mix_mode == "straight_concat":
                h = cat
            else:
                h = qconv(cat, cat_p, L[f"block{b}.mix"], E[f"block{b}"])
        else:
            h = qconv(h, E[prev], L[f"block{b}.conv"], E[f"block{b}"], relu)
        prev = f"block{b}"
    if cfg.post_block_conv != "none":
        h = qconv(h, E[prev], L["post"], E["post"])
        prev = "post"
    up = qconv(lr, E["input"], L["upsample"], E["upsample"])
    if cfg.merge_mode == "add":
        feat = qconv(h, E[prev], L["conv_out"], E["conv_out"])
        pre = qadd(feat, E["conv_out"], up, E["upsample"], E["merge"])
    else:
        merged = channel_concat([qrescale(h, E[prev], E["merge"]), qrescale(up, E["upsample"], E["merge"])])
        pre = qconv(merged, E["merge"], L["conv_out"], E["conv_out"])
    return depth_to_space(pre, cfg.scale)


def lr_to_uint8(lr: np.ndarray) -> np.ndarray:
    """Quantize a [0, 1] float image with the pinned input parameters."""
    return quantize(np.asarray(lr), UNIT)


# -- representative dataset search ---------------------------------------------

def quantized_psnr(qm: QModel, val_pairs, metric: str = "rgb") -> float:
    """Mean PSNR of the dequantized outputs over ``(lr, hr)`` float pairs."""
    scores = []
    for lr, hr in val_pairs:
        lr = lr[None] if lr.ndim == 3 else lr
        hr = hr[None] if hr.ndim == 3 else hr
        sr = dequantize(qforward(qm, lr_to_uint8(lr)), qm.edges["output"])
        try:
            scores.append(psnr(sr, hr, metric))
        except InfinitePSNR:
            scores.append(math.inf)
    return float(np.mean(scores))


@dataclass
class SearchResult:
    best_index: int
    scores: list[float]
    qmodel: QModel | None = None

    def write_csv(self, path, ids: Sequence[str] | None = None) -> None:
        ids = ids or [str(i) for i in range(len(self.scores))]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["candidate", "psnr"])
            for cid, s in zip(ids, self.scores):
                wr.writerow([cid, f"{s:.6f}"])
            wr.writerow(["# best", ids[self.best_index]])


def representative_search(model: Model, candidates: Sequence[np.ndarray], val_pairs, metric: str = "rgb") -> SearchResult:
    """Calibrate on each candidate alone, quantize, score; keep the best.

    Ties go to the lowest index. A candidate that fails to calibrate or
    quantize scores ``-inf`` instead of aborting the search.
    """
    if len(candidates) == 0:
        raise ValueError("representative_search needs at least one candidate")
    if len(val_pairs) == 0:
        raise ValueError("representative_search needs validation pairs")
    scores, best, best_qm = [], 0, None
    for i, cand in enumerate(candidates):
        try:
            qm = quantize_model(model, calibrate(model, [cand]))
            score = quantized_psnr(qm, val_pairs, metric)
        except (ValueError, RuntimeError) as e:
            log.warning("candidate %d failed: %s", i, e)
            qm, score = None, -math.inf
        scores.append(score)
        log.info("candidate %d: %.4f dB", i, score)
        if i == 0 or score > scores[best]:
            best, best_qm = i, qm
    return SearchResult(best, scores, best_qm)


# -- quantized model files --------------------------------------------------------

def save_qmodel(qm: QModel, path) -> None:
    plan = layer_plan(qm.config)
    buf = [QUANT_MAGIC, struct.pack("<I", FORMAT_VERSION), pack_config(qm.config), struct.pack("<I", len(plan))]
    for spec in plan:
        layer = qm.layers[spec.name]
        buf.append(struct.pack(_RECORD_HEAD, spec.tag, spec.out_channels, spec.in_channels, spec.kh, spec.kw))
        buf.append(np.ascontiguousarray(layer.kernel, dtype=np.uint8).tobytes())
        buf.append(struct.pack("<di", layer.wparams.scale, layer.wparams.zero_point))
        buf.append(np.ascontiguousarray(layer.bias, dtype="<i4").tobytes())
        buf.append(struct.pack("<B", int(layer.trainable)))
    names = edge_names(qm.config)
    buf.append(struct.pack("<I", len(names)))
    for name in names:
        raw = name.encode()
        p = qm.edges[name]
        buf.append(struct.pack("<H", len(raw)) + raw + struct.pack("<di", p.scale, p.zero_point))
    Path(path).write_bytes(b"".join(buf))


def _read_params(r: Reader) -> QuantParams:
    scale, zp = r.unpack("<di")
    try:
        return QuantParams(scale, zp)
    except ValueError as e:
        raise WeightFormatError(str(e), r.layer) from None


def load_qmodel(path) -> QModel:
    r = Reader(Path(path).read_bytes())
    cfg, count = read_header(r, QUANT_MAGIC)
    heads, records = [], []
    for i in range(count):
        r.layer = i
        head = r.unpack(_RECORD_HEAD)
        _, o, c, kh, kw = head
        kernel = r.array(np.uint8, o * c * kh * kw).reshape(o, c, kh, kw)
        wp = _read_params(r)
        bias = r.array(np.int32, o)
        (trainable,) = r.unpack("<B")
        heads.append(head)
        records.append(QConv(kernel, wp, bias, bool(trainable)))
    r.layer = None
    plan = check_records(cfg, heads)
    (n_edges,) = r.unpack("<I")
    edges = {}
    for _ in range(n_edges):
        (ln,) = r.unpack("<H")
        try:
            name = r.take(ln).decode()
        except UnicodeDecodeError:
            raise WeightFormatError("edge name is not valid UTF-8") from None
        edges[name] = _read_params(r)
    if r.pos != len(r.data):
        raise WeightFormatError(f"{len(r.data) - r.pos} trailing bytes after edge table")
    want = edge_names(cfg)
    if sorted(edges) != sorted(want):
        raise WeightFormatError(f"edge table {sorted(edges)} does not match config edges {sorted(want)}")
    return QModel(cfg, {s.name: rec for s, rec in zip(plan, records)}, {n: edges[n] for n in want})
