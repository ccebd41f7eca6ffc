"""Rank-4 channel-last tensors and channel-axis structural operations.

Tensors are plain :class:`numpy.ndarray` objects laid out as
``(batch, height, width, channel)``. The helpers here validate that layout
and implement the split / concat / rotate moves used by the network.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

ELEMENT_DTYPES = (np.float32, np.float64, np.uint8, np.int32)


def check_tensor(t: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Validate a channel-last rank-4 array and return it unchanged.

    Raises:
        ValueError: wrong rank, empty dimension or unsupported element type.
    """
    t = np.asarray(t)
    if t.ndim != 4:
        raise ValueError(f"{name} must be rank 4 (n, h, w, c), got shape {t.shape}")
    if min(t.shape) < 1:
        raise ValueError(f"{name} has an empty dimension: {t.shape}")
    if t.dtype.type not in ELEMENT_DTYPES:
        raise ValueError(f"{name} has unsupported dtype {t.dtype}")
    return t


def channel_rotate(t: np.ndarray, k: int) -> np.ndarray:
    """Circularly shift channels so that output channel ``c`` holds input channel ``(c - k) mod C``."""
    t = check_tensor(t)
    return np.roll(t, int(k) % t.shape[-1], axis=-1)


def channel_split(t: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    """Split along channels into contiguous pieces of the given sizes."""
    t = check_tensor(t)
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes):
        raise ValueError(f"split sizes must be >= 1, got {sizes}")
    if sum(sizes) != t.shape[-1]:
        raise ValueError(f"split sizes {sizes} do not sum to {t.shape[-1]} channels")
    bounds = np.cumsum(sizes)[:-1]
    return np.split(t, bounds, axis=-1)


def channel_concat(parts: Sequence[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ValueError("channel_concat needs at least one part")
    parts = [check_tensor(p, f"part {i}") for i, p in enumerate(parts)]
    lead = parts[0]
    for i, p in enumerate(parts[1:], start=1):
        if p.shape[:3] != lead.shape[:3]:
            raise ValueError(f"part {i} has shape {p.shape}, expected (n, h, w) = {lead.shape[:3]}")
        if p.dtype != lead.dtype:
            raise ValueError(f"part {i} has dtype {p.dtype}, expected {lead.dtype}")
    return np.concatenate(parts, axis=-1)
