"""Float forward operators on channel-last tensors.

``conv2d_direct`` is the slow reference that every faster path is checked
against. All convolutions are stride 1 with "same" zero padding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import channel_concat, channel_split, check_tensor

KERNEL_SIZES = (1, 3)


@dataclass
class ConvWeights:
    """Kernel ``(out, in, kh, kw)``, bias ``(out,)`` and a trainable flag."""

    kernel: np.ndarray
    bias: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel)
        self.bias = np.asarray(self.bias)
        if self.kernel.ndim != 4:
            raise ValueError(f"kernel must be (out, in, kh, kw), got {self.kernel.shape}")
        kh, kw = self.kernel.shape[2:]
        if kh not in KERNEL_SIZES or kw not in KERNEL_SIZES:
            raise ValueError(f"kernel size {kh}x{kw} not supported; use 1 or 3")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match {self.kernel.shape[0]} outputs")

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def ksize(self) -> tuple[int, int]:
        return self.kernel.shape[2], self.kernel.shape[3]

    @property
    def size(self) -> int:
        return self.kernel.size + self.bias.size

    def copy(self) -> "ConvWeights":
        return ConvWeights(self.kernel.copy(), self.bias.copy(), self.trainable)


def _check_conv_input(x: np.ndarray, w: ConvWeights) -> np.ndarray:
    x = check_tensor(x, "conv input")
    if x.shape[-1] != w.in_channels:
        raise ValueError(f"input has {x.shape[-1]} channels, kernel expects {w.in_channels}")
    return x


def pad_same(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    ph, pw = kh // 2, kw // 2
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Gather "same"-padded patches into rows ordered ``(c, i, j)``.

    Returns an array of shape ``(n*h*w, c*kh*kw)`` so that
    ``im2col(x) @ kernel.reshape(out, -1).T`` is the convolution.
    """
    n, h, w, c = x.shape
    if kh == 1 and kw == 1:
        return x.reshape(n * h * w, c)
    win = sliding_window_view(pad_same(x, kh, kw), (kh, kw), axis=(1, 2))
    return win.reshape(n * h * w, c * kh * kw)


def conv2d_direct(x: np.ndarray, w: ConvWeights) -> np.ndarray:
    """Reference convolution by explicit loops over pixels and kernel taps."""
    x = _check_conv_input(x, w)
    n, h, wd, _ = x.shape
    kh, kw = w.ksize
    dtype = np.result_type(x.dtype, w.kernel.dtype)
    xp = pad_same(x.astype(dtype), kh, kw)
    kern = w.kernel.astype(dtype)
    out = np.empty((n, h, wd, w.out_channels), dtype=dtype)
    for b in range(n):
        for y in range(h):
            for xx in range(wd):
                acc = w.bias.astype(dtype).copy()
                for i in range(kh):
                    for j in range(kw):
                        acc += kern[:, :, i, j] @ xp[b, y + i, xx + j, :]
                out[b, y, xx] = acc
    return out


def conv2d(x: np.ndarray, w: ConvWeights) -> np.ndarray:
    """Convolution via patch gathering and one matrix product.

    Square 1x1 and 3x3 kernels take the fast path; other shapes use
    :func:`conv2d_direct`.
    """
    x = _check_conv_input(x, w)
    kh, kw = w.ksize
    if kh != kw:
        return conv2d_direct(x, w)
    n, h, wd, _ = x.shape
    dtype = np.result_type(x.dtype, w.kernel.dtype)
    cols = im2col(x.astype(dtype, copy=False), kh, kw)
    out = cols @ w.kernel.reshape(w.out_channels, -1).T.astype(dtype, copy=False)
    out += w.bias.astype(dtype, copy=False)
    return out.reshape(n, h, wd, w.out_channels)


def hetero_group_conv(x: np.ndarray, branches: Sequence[tuple[int, ConvWeights]], conv=conv2d) -> np.ndarray:
    """Split channels by branch size, convolve each part with its own weights, concatenate."""
    sizes = [c for c, _ in branches]
    for c, w in branches:
        if w.in_channels != c or w.out_channels != c:
            raise ValueError(f"branch of {c} channels has kernel {w.kernel.shape}")
    parts = channel_split(x, sizes)
    return channel_concat([conv(p, w) for p, (_, w) in zip(parts, branches)])


def depth_to_space(x: np.ndarray, r: int) -> np.ndarray:
    """Rearrange ``C`` channels into an ``r``-times larger grid of ``C / r**2`` channels.

    ``out[n, h*r + i, w*r + j, c] = in[n, h, w, (i*r + j) * (C // r**2) + c]``.
    """
    x = check_tensor(x)
    n, h, w, c = x.shape
    if c % (r * r):
        raise ValueError(f"{c} channels not divisible by block size {r}**2")
    co = c // (r * r)
    y = x.reshape(n, h, w, r, r, co).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(n, h * r, w * r, co)


def space_to_depth(x: np.ndarray, r: int) -> np.ndarray:
    """Exact inverse of :func:`depth_to_space`."""
    x = check_tensor(x)
    n, hr, wr, co = x.shape
    if hr % r or wr % r:
        raise ValueError(f"spatial size {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    y = x.reshape(n, h, r, w, r, co).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(n, h, w, r * r * co)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def clipped_relu(x: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    if not lo < hi:
        raise ValueError(f"clipped_relu needs lo < hi, got ({lo}, {hi})")
    return np.clip(x, lo, hi).astype(np.asarray(x).dtype, copy=False)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"cannot add tensors of shape {a.shape} and {b.shape}")
    return a + b


def nearest_upsample_reference(x: np.ndarray, r: int) -> np.ndarray:
    """Nearest-neighbour upsampling by index arithmetic: ``out[y, x] = in[y // r, x // r]``."""
    x = check_tensor(x)
    if r < 1:
        raise ValueError(f"upsample factor must be >= 1, got {r}")
    n, h, w, c = x.shape
    rows = np.arange(h * r) // r
    cols = np.arange(w * r) // r
    return x[:, rows][:, :, cols]
