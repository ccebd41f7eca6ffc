"""Image I/O, bicubic resampling, PSNR and the challenge score."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
# PNG colour types: 0 gray, 2 RGB, 3 palette, 4 gray+alpha, 6 RGBA
_SUPPORTED_COLOUR_TYPES = {0, 2, 3}


class ImageFormatError(ValueError):
    pass


class InfinitePSNR(ArithmeticError):
    """Raised by :func:`psnr` when the two images are identical."""


@dataclass
class ImagePair:
    """Float [0, 1] images, ``hr`` exactly ``scale`` times the size of ``lr``."""

    lr: np.ndarray
    hr: np.ndarray
    id: str = ""
    scale: int = 3

    def __post_init__(self):
        lh, lw = self.lr.shape[:2]
        hh, hw = self.hr.shape[:2]
        if (hh, hw) != (lh * self.scale, lw * self.scale):
            raise ValueError(f"pair {self.id!r}: hr {hh}x{hw} is not {self.scale}x lr {lh}x{lw}")


# -- PNG ---------------------------------------------------------------------

def _png_header(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(33)
    if len(head) < 33 or head[:8] != PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise ImageFormatError(f"{path}: not a PNG file")
    return head[24], head[25]


def load_png(path) -> np.ndarray:
    """Read an 8-bit PNG as an ``(h, w, 3)`` uint8 array; grayscale is replicated to 3 channels."""
    depth, colour = _png_header(path)
    if colour not in _SUPPORTED_COLOUR_TYPES:
        raise ImageFormatError(f"{path}: unsupported PNG colour type {colour} (alpha channels are not accepted)")
    if depth != 8 and not (colour == 3 and depth <= 8):
        raise ImageFormatError(f"{path}: unsupported bit depth {depth}, need 8-bit")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.copy()


def save_png(t: np.ndarray, path) -> None:
    """Write an ``(h, w, 3)`` or ``(1, h, w, 3)`` uint8 image losslessly."""
    t = np.asarray(t)
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise ValueError(f"can only save a single image, got batch of {t.shape[0]}")
        t = t[0]
    if t.dtype != np.uint8 or t.ndim != 3 or t.shape[2] != 3:
        raise ValueError(f"save_png needs (h, w, 3) uint8, got {t.shape} {t.dtype}")
    Image.fromarray(t, "RGB").save(path, format="PNG")


def to_float(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float32) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(img, np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


# -- bicubic -------------------------------------------------------------------

def cubic_kernel(x, a: float = -0.5):
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` bicubic resampling operator with clamp-to-edge borders.

    Downscaling stretches the kernel by the scale factor (antialiasing);
    each row is normalised to sum to one.
    """
    s = n_out / n_in
    width = 1.0 / s if s < 1 else 1.0
    mat = np.zeros((n_out, n_in))
    for x in range(n_out):
        u = (x + 0.5) / s - 0.5
        lo = math.floor(u - 2 * width) + 1
        taps = np.arange(lo, math.ceil(u + 2 * width))
        wts = cubic_kernel((u - taps) / width)
        np.add.at(mat[x], np.clip(taps, 0, n_in - 1), wts)
    return mat / mat.sum(axis=1, keepdims=True)


def _resize(img: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    img = np.asarray(img)
    h, w = img.shape[-3], img.shape[-2]
    rh, rw = resize_matrix(h, h_out), resize_matrix(w, w_out)
    out = np.einsum("yh,...hwc->...ywc", rh, img.astype(np.float64), optimize=True)
    out = np.einsum("...ywc,xw->...yxc", out, rw, optimize=True)
    return np.clip(out, 0.0, 1.0).astype(img.dtype if img.dtype.kind == "f" else np.float64)


def bicubic_downsample(hr: np.ndarray, factor: int = 3) -> np.ndarray:
    """Antialiased bicubic downscaling of ``(..., h, w, c)`` float images."""
    h, w = hr.shape[-3], hr.shape[-2]
    if h % factor or w % factor:
        raise ValueError(f"image size {h}x{w} not divisible by {factor}")
    return _resize(hr, h // factor, w // factor)


def bicubic_upsample(lr: np.ndarray, factor: int = 3) -> np.ndarray:
    h, w = lr.shape[-3], lr.shape[-2]
    return _resize(lr, h * factor, w * factor)


# -- metrics -------------------------------------------------------------------

def luma(img: np.ndarray) -> np.ndarray:
    """BT.601 studio-swing luma of [0, 1] RGB, returned on a [0, 1] scale."""
    img = np.asarray(img, dtype=np.float64)
    return (65.481 * img[..., 0] + 128.553 * img[..., 1] + 24.966 * img[..., 2] + 16.0) / 255.0


def psnr(a: np.ndarray, b: np.ndarray, mode: str = "rgb") -> float:
    """PSNR in dB with peak 1.0 over RGB or the Y channel.

    Raises:
        InfinitePSNR: the images are identical in the chosen mode.
    """
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if mode == "rgb":
        da, db = a.astype(np.float64), b.astype(np.float64)
    elif mode == "y":
        da, db = luma(a), luma(b)
    else:
        raise ValueError(f"unknown PSNR mode {mode!r}")
    mse = float(np.mean((da - db) ** 2))
    if mse == 0.0:
        raise InfinitePSNR("identical images")
    return 10.0 * math.log10(1.0 / mse)


def challenge_score(psnr_uint8: float, runtime_ms: float) -> float:
    """``2**(2 * (psnr - 30)) / (runtime_ms * 1e-5)``."""
    if not runtime_ms > 0:
        raise ValueError(f"runtime must be positive, got {runtime_ms}")
    return 2.0 ** (2.0 * (psnr_uint8 - 30.0)) / (runtime_ms * 1e-5)


# -- datasets -------------------------------------------------------------------

def crop_to_multiple(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape[0] - img.shape[0] % factor, img.shape[1] - img.shape[1] % factor
    return img[:h, :w]


def list_pngs(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")


def load_hr_images(directory) -> list[np.ndarray]:
    return [to_float(load_png(p)) for p in list_pngs(directory)]


def load_pairs(directory, scale: int = 3) -> list[ImagePair]:
    """Pairs from ``directory/LR`` and ``directory/HR`` (matched by file name),
    or from HR images alone with bicubic-generated LR."""
    d = Path(directory)
    if (d / "HR").is_dir() and (d / "LR").is_dir():
        pairs = []
        for hp in list_pngs(d / "HR"):
            lp = d / "LR" / hp.name
            if not lp.exists():
                raise FileNotFoundError(f"no LR image for {hp.name}")
            pairs.append(ImagePair(to_float(load_png(lp)), to_float(load_png(hp)), hp.stem, scale))
        return pairs
    pairs = []
    for p in list_pngs(d):
        hr = crop_to_multiple(to_float(load_png(p)), scale)
        pairs.append(ImagePair(bicubic_downsample(hr, scale), hr, p.stem, scale))
    return pairs


def synthetic_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Procedural RGB scene: gradient background, rectangles, discs and stripes."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    t = (xx / w * rng.uniform(-1, 1) + yy / h * rng.uniform(-1, 1)) * 0.5 + 0.5
    img = c0 * (1 - t[..., None]) + c1 * t[..., None]
    for _ in range(rng.integers(2, 6)):
        y0, x0 = rng.integers(0, h), rng.integers(0, w)
        y1, x1 = y0 + rng.integers(h // 8, h // 2), x0 + rng.integers(w // 8, w // 2)
        img[y0:y1, x0:x1] = rng.uniform(0, 1, 3)
    for _ in range(rng.integers(1, 4)):
        cy, cx, rad = rng.uniform(0, h), rng.uniform(0, w), rng.uniform(h / 12, h / 4)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 < rad ** 2] = rng.uniform(0, 1, 3)
    theta, freq = rng.uniform(0, np.pi), rng.uniform(0.15, 0.6)
    y0, x0 = rng.integers(0, h // 2), rng.integers(0, w // 2)
    patch = (slice(y0, y0 + h // 2), slice(x0, x0 + w // 2))
    wave = 0.5 + 0.5 * np.sign(np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta))))
    img[patch] = (wave[..., None] * rng.uniform(0, 1, 3) + (1 - wave[..., None]) * rng.uniform(0, 1, 3))[patch]
    return img.astype(np.float32)


def synthetic_dataset(n: int, size: int = 144, seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [synthetic_image(rng, size, size) for _ in range(n)]
