"""Backpropagation, losses, Adam, the warm-up schedule, augmentation and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import ImagePair, bicubic_downsample, crop_to_multiple
from .model import Model, forward_with_cache
from .ops import ConvWeights, im2col, space_to_depth
from .tensor import channel_concat, channel_rotate, channel_split

log = logging.getLogger(__name__)


# -- losses ------------------------------------------------------------------

def _check_pair(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")


def charbonnier_loss(pred: np.ndarray, target: np.ndarray, eps: float = 0.1) -> tuple[float, np.ndarray]:
    """Mean of ``sqrt(d**2 + eps**2)`` and its gradient with respect to ``pred``."""
    _check_pair(pred, target)
    if not eps > 0:
        raise ValueError("eps must be positive")
    d = pred - target
    root = np.sqrt(d * d + eps * eps)
    return float(np.mean(root)), d / root / d.size


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    _check_pair(pred, target)
    d = pred - target
    return float(np.mean(d * d)), 2.0 * d / d.size


# -- backward ------------------------------------------------------------------

def conv_backward(x: np.ndarray, w: ConvWeights, gy: np.ndarray, need_weights: bool = True):
    """Gradients of a "same" convolution: ``(dx, dkernel, dbias)``."""
    n, h, wd, c = x.shape
    o = w.out_channels
    kh, kw = w.ksize
    g2 = gy.reshape(-1, o)
    dk = db = None
    if need_weights:
        dk = (g2.T @ im2col(x, kh, kw)).reshape(w.kernel.shape)
        db = g2.sum(axis=0)
    dcols = g2 @ w.kernel.reshape(o, -1)
    if kh == 1 and kw == 1:
        return dcols.reshape(n, h, wd, c), dk, db
    dcols = dcols.reshape(n, h, wd, c, kh, kw)
    dxp = np.zeros((n, h + kh - 1, wd + kw - 1, c), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + h, j:j + wd, :] += dcols[..., i, j]
    return dxp[:, kh // 2:kh // 2 + h, kw // 2:kw // 2 + wd, :], dk, db


def backward(model: Model, cache: dict[str, np.ndarray], grad_out: np.ndarray):
    """Reverse-mode pass through :func:`xcat.model.forward_with_cache`.

    Returns ``(grads, grad_input)`` where ``grads`` maps each trainable layer
    name to ``(dkernel, dbias)``. The fixed upsample kernel passes gradient
    to the input but receives none itself.
    """
    cfg = model.config
    L = model.layers
    if "d2s" not in cache or cache["output"].shape != grad_out.shape:
        raise RuntimeError("cache does not belong to a forward pass with this output shape")
    missing = [k for k in L if f"{k}.in" not in cache]
    if missing:
        raise RuntimeError(f"cache lacks inputs for layers {missing}; was it produced by this model?")
    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def conv_b(name, gy):
        w = L[name]
        dx, dk, db = conv_backward(cache[f"{name}.in"], w, gy, need_weights=w.trainable)
        if w.trainable:
            grads[name] = (dk, db)
        return dx

    def act_b(name, g):
        if not cfg.hidden_relu:
            return g
        return g * (cache[f"{name}.pre"] > 0)

    d2s = cache["d2s"]
    g = grad_out * ((d2s > 0) & (d2s < 1))
    g_pre = space_to_depth(g, cfg.scale)
    if cfg.merge_mode == "add":
        g_up = g_pre
        g_h = conv_b("conv_out", g_pre)
    else:
        g_merged = conv_b("conv_out", g_pre)
        g_h, g_up = channel_split(g_merged, [cfg.feature_channels, cfg.out_channels_before_d2s])
    g_input = conv_b("upsample", g_up)
    if cfg.post_block_conv != "none":
        g_h = conv_b("post", g_h)
    for b in reversed(range(cfg.m)):
        if cfg.block_kind == "hxblock":
            if cfg.mix_mode == "cross_concat":
                g_cat = channel_rotate(g_h, -cfg.rotation)
            elif cfg.mix_mode == "straight_concat":
                g_cat = g_h
            else:
                g_cat = conv_b(f"block{b}.mix", g_h)
            parts = channel_split(g_cat, cfg.split)
            g_h = channel_concat([
                conv_b(f"block{b}.branch{k}", act_b(f"block{b}.branch{k}", gp)) for k, gp in enumerate(parts)
            ])
        else:
            g_h = conv_b(f"block{b}.conv", act_b(f"block{b}.conv", g_h))
    g_input = g_input + conv_b("conv_in", act_b("conv_in", g_h))
    return grads, g_input


# -- optimizer and schedule -------------------------------------------------------

@dataclass
class TrainConfig:
    stage: str = "one"
    loss: str = "charbonnier"
    charbonnier_eps: float = 0.1
    epochs: int = 50
    minibatches_per_epoch: int = 10000
    batch_size: int = 16
    lr_init: float = 1e-3
    lr_peak: float = 2.5e-3
    lr_final: float = 1e-4
    warmup_epochs: int = 5
    seed: int = 0
    crop_hr: int = 96
    scale: int = 3
    intensity_set: tuple[float, ...] = (1.0, 0.7, 0.5)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    @classmethod
    def stage_one(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def stage_two(cls, **kw) -> "TrainConfig":
        base = dict(stage="two", loss="mse", lr_init=1e-4, lr_peak=1.25e-3, lr_final=1e-4)
        base.update(kw)
        return cls(**base)

    @classmethod
    def desk(cls, stage: str = "one", **kw) -> "TrainConfig":
        """Small run: 3 epochs of 50 minibatches of 4 crops, warm-up over the first 2 epochs."""
        small = dict(epochs=3, minibatches_per_epoch=50, batch_size=4, warmup_epochs=2)
        small.update(kw)
        return cls.stage_two(**small) if stage == "two" else cls.stage_one(**small)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["intensity_set"] = list(self.intensity_set)
        return d


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``.

    Linear from ``lr_init`` at epoch 1 to ``lr_peak`` at ``warmup_epochs``,
    then linear down to ``lr_final`` at the last epoch.
    """
    if not 1 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside 1..{cfg.epochs}")
    warm = cfg.warmup_epochs
    if epoch <= warm:
        t = (epoch - 1) / (warm - 1) if warm > 1 else 1.0
        return (1 - t) * cfg.lr_init + t * cfg.lr_peak
    t = (epoch - warm) / (cfg.epochs - warm)
    return (1 - t) * cfg.lr_peak + t * cfg.lr_final


@dataclass
class TrainState:
    """Adam moments for every trainable tensor, plus counters and the RNG."""

    m: dict[str, tuple[np.ndarray, np.ndarray]]
    v: dict[str, tuple[np.ndarray, np.ndarray]]
    step: int = 0
    epoch: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    @classmethod
    def for_model(cls, model: Model, seed: int = 0) -> "TrainState":
        zeros = {
            k: (np.zeros_like(w.kernel), np.zeros_like(w.bias)) for k, w in model.layers.items() if w.trainable
        }
        return cls(
            m=zeros,
            v={k: (a.copy(), b.copy()) for k, (a, b) in zeros.items()},
            rng=np.random.default_rng(seed),
        )


def adam_step(
    model: Model, state: TrainState, grads, lr: float,
    beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update of the model's trainable layers, in place."""
    state.step += 1
    t = state.step
    c1, c2 = 1 - beta1 ** t, 1 - beta2 ** t
    for name, gs in grads.items():
        w = model.layers[name]
        if not w.trainable:
            continue
        for i, (p, g) in enumerate(zip((w.kernel, w.bias), gs)):
            m, v = state.m[name][i], state.v[name][i]
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


# -- augmentation -----------------------------------------------------------------

def apply_augment(
    lr: np.ndarray, hr: np.ndarray, top: int, left: int, size_lr: int, scale: int,
    rot: int = 0, flip_h: bool = False, flip_v: bool = False, intensity: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Crop an aligned LR/HR patch pair and apply the geometric and intensity transforms."""
    lp = lr[top:top + size_lr, left:left + size_lr]
    hp = hr[top * scale:(top + size_lr) * scale, left * scale:(left + size_lr) * scale]
    out = []
    for p in (lp, hp):
        p = np.rot90(p, rot, axes=(0, 1))
        if flip_h:
            p = p[:, ::-1]
        if flip_v:
            p = p[::-1]
        out.append(np.ascontiguousarray(p * np.float32(intensity), dtype=np.float32))
    return out[0], out[1]


def augment(
    hr: np.ndarray, rng: np.random.Generator, crop_hr: int = 96, scale: int = 3,
    intensity_set: Sequence[float] = (1.0, 0.7, 0.5), lr: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Random aligned crop, 90-degree rotation, flips and intensity scaling of one image.

    ``lr`` defaults to the bicubic downsampling of ``hr``.
    """
    if crop_hr % scale:
        raise ValueError(f"crop {crop_hr} not divisible by scale {scale}")
    if hr.shape[0] < crop_hr or hr.shape[1] < crop_hr:
        raise ValueError(f"image {hr.shape[:2]} smaller than crop {crop_hr}")
    if lr is None:
        hr = crop_to_multiple(hr, scale)
        lr = bicubic_downsample(hr, scale)
    size_lr = crop_hr // scale
    top = int(rng.integers(0, lr.shape[0] - size_lr + 1))
    left = int(rng.integers(0, lr.shape[1] - size_lr + 1))
    rot = int(rng.integers(0, 4))
    flip_h, flip_v = bool(rng.integers(0, 2)), bool(rng.integers(0, 2))
    intensity = float(intensity_set[rng.integers(0, len(intensity_set))])
    return apply_augment(lr, hr, top, left, size_lr, scale, rot, flip_h, flip_v, intensity)


# -- training loop -----------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    history: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=["epoch", "lr", "loss", "seconds"])
            wr.writeheader()
            for h in self.history:
                wr.writerow(h)


def _prepare(dataset, scale: int) -> list[tuple[np.ndarray, np.ndarray]]:
    pairs = []
    for item in dataset:
        if isinstance(item, ImagePair):
            pairs.append((item.lr.astype(np.float32), item.hr.astype(np.float32)))
        elif isinstance(item, tuple):
            pairs.append((np.asarray(item[0], np.float32), np.asarray(item[1], np.float32)))
        else:
            hr = crop_to_multiple(np.asarray(item, np.float32), scale)
            pairs.append((bicubic_downsample(hr, scale).astype(np.float32), hr))
    return pairs


def train_step(model: Model, state: TrainState, lr_batch, hr_batch, cfg: TrainConfig, lr: float) -> float:
    out, cache = forward_with_cache(model, lr_batch)
    if cfg.loss == "charbonnier":
        loss, g = charbonnier_loss(out, hr_batch, cfg.charbonnier_eps)
    elif cfg.loss == "mse":
        loss, g = mse_loss(out, hr_batch)
    else:
        raise ValueError(f"unknown loss {cfg.loss!r}")
    grads, _ = backward(model, cache, g.astype(out.dtype))
    adam_step(model, state, grads, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return loss


def train(
    model: Model, cfg: TrainConfig, dataset,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run one training stage on a copy of ``model``.

    ``dataset`` holds HR images (LR made by bicubic downsampling),
    :class:`ImagePair` objects or ``(lr, hr)`` tuples.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    data = _prepare(dataset, cfg.scale)
    size_lr = cfg.crop_hr // cfg.scale
    for lr_img, _ in data:
        if min(lr_img.shape[:2]) < size_lr:
            raise ValueError(f"LR image {lr_img.shape[:2]} smaller than crop {size_lr}")
    model = model.copy()
    state = TrainState.for_model(model, cfg.seed)
    rng = state.rng
    result = TrainResult(model)
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_schedule(cfg, epoch)
        t0 = time.perf_counter()
        total = 0.0
        for _ in range(cfg.minibatches_per_epoch):
            lrs, hrs = [], []
            for _ in range(cfg.batch_size):
                lr_img, hr_img = data[int(rng.integers(0, len(data)))]
                lp, hp = augment(hr_img, rng, cfg.crop_hr, cfg.scale, cfg.intensity_set, lr=lr_img)
                lrs.append(lp)
                hrs.append(hp)
            dtype = model.dtype
            total += train_step(model, state, np.stack(lrs).astype(dtype), np.stack(hrs).astype(dtype), cfg, lr)
        state.epoch = epoch
        rec = {"epoch": epoch, "lr": lr, "loss": total / cfg.minibatches_per_epoch,
               "seconds": round(time.perf_counter() - t0, 3)}
        result.history.append(rec)
        log.info("epoch %d lr %.3g loss %.6f (%.1fs)", epoch, lr, rec["loss"], rec["seconds"])
        if on_epoch:
            on_epoch(rec)
    return result
