import math

import numpy as np
import pytest
from PIL import Image

from xcat.data import (
    ImageFormatError,
    ImagePair,
    InfinitePSNR,
    bicubic_downsample,
    bicubic_upsample,
    challenge_score,
    cubic_kernel,
    load_pairs,
    load_png,
    psnr,
    save_png,
    synthetic_dataset,
    to_uint8,
)


def test_png_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (17, 23, 3), dtype=np.uint8)
    save_png(img, tmp_path / "a.png")
    np.testing.assert_array_equal(load_png(tmp_path / "a.png"), img)
    save_png(img[None], tmp_path / "b.png")
    np.testing.assert_array_equal(load_png(tmp_path / "b.png"), img)


def test_png_grayscale_promoted(tmp_path, rng):
    g = rng.integers(0, 256, (5, 6), dtype=np.uint8)
    Image.fromarray(g, "L").save(tmp_path / "g.png")
    out = load_png(tmp_path / "g.png")
    assert out.shape == (5, 6, 3)
    for c in range(3):
        np.testing.assert_array_equal(out[..., c], g)


def test_png_16bit_rejected(tmp_path):
    Image.fromarray(np.full((4, 4), 40000, np.uint16)).save(tmp_path / "d.png")
    with pytest.raises(ImageFormatError, match="bit depth"):
        load_png(tmp_path / "d.png")


def test_png_rgba_and_garbage_rejected(tmp_path):
    Image.fromarray(np.zeros((4, 4, 4), np.uint8), "RGBA").save(tmp_path / "a.png")
    with pytest.raises(ImageFormatError):
        load_png(tmp_path / "a.png")
    (tmp_path / "x.png").write_bytes(b"not a png at all, really not one")
    with pytest.raises(ImageFormatError):
        load_png(tmp_path / "x.png")


def test_cubic_kernel_interpolates():
    np.testing.assert_allclose(cubic_kernel([0, 1, 2, -1, -2, 2.5]), [1, 0, 0, 0, 0, 0], atol=1e-15)


def test_bicubic_constant():
    img = np.full((9, 12, 3), 0.37)
    np.testing.assert_allclose(bicubic_downsample(img, 3), 0.37, atol=1e-12)
    np.testing.assert_allclose(bicubic_upsample(img[:3, :4], 3), 0.37, atol=1e-12)


def test_bicubic_checkerboard_oracle():
    board = (np.indices((3, 3)).sum(axis=0) % 2).astype(np.float64)
    img = np.repeat(board[..., None], 3, axis=2)
    # output pixel sits at the centre of the 3x3 block; antialiased taps are k(d/3)/3
    want = 0.0
    for a in range(-5, 6):
        for b in range(-5, 6):
            wgt = float(cubic_kernel(a / 3)) * float(cubic_kernel(b / 3)) / 9
            want += wgt * board[min(max(1 + a, 0), 2), min(max(1 + b, 0), 2)]
    got = bicubic_downsample(img, 3)
    assert got.shape == (1, 1, 3)
    np.testing.assert_allclose(got[0, 0], want, rtol=1e-12)


def test_bicubic_commutes_with_flip(rng):
    img = rng.uniform(0, 1, (12, 15, 3))
    np.testing.assert_allclose(bicubic_downsample(img[:, ::-1]), bicubic_downsample(img)[:, ::-1], atol=1e-12)


def test_bicubic_indivisible():
    with pytest.raises(ValueError):
        bicubic_downsample(np.zeros((10, 9, 3)), 3)


def test_psnr_examples():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a + 1.0) == pytest.approx(0.0)
    assert psnr(a, a + 0.5) == pytest.approx(6.0206, abs=1e-4)
    with pytest.raises(InfinitePSNR):
        psnr(a, a)
    with pytest.raises(ValueError):
        psnr(a, np.zeros((4, 4, 1)))


def test_psnr_y_mode():
    a = np.zeros((2, 2, 3))
    b = a.copy()
    b[..., 1] = 1.0
    # luma difference is 128.553/255 everywhere
    want = 10 * math.log10(1 / (128.553 / 255) ** 2)
    assert psnr(a, b, "y") == pytest.approx(want)
    with pytest.raises(ValueError):
        psnr(a, b, "lab")


def test_psnr_symmetric_and_monotone(rng):
    base = rng.uniform(0.2, 0.8, (16, 16, 3))
    noise = rng.normal(size=base.shape)
    b = base + 0.05 * noise
    assert psnr(base, b) == psnr(b, base)
    vals = [psnr(base, base + amp * noise) for amp in (0.01, 0.03, 0.1)]
    assert vals[0] > vals[1] > vals[2]


def test_challenge_score_reference_values():
    assert challenge_score(29.81, 320) == pytest.approx(240, abs=1)
    assert challenge_score(29.82, 370) == pytest.approx(210, abs=1)
    assert challenge_score(30.0, 100000) == 1.0
    with pytest.raises(ValueError):
        challenge_score(30.0, 0)


def test_challenge_score_monotone(rng):
    ps = rng.uniform(25, 35, 20)
    ts = rng.uniform(5, 1000, 20)
    for p, t in zip(ps, ts):
        assert challenge_score(p + 0.01, t) > challenge_score(p, t)
        assert challenge_score(p, t * 1.01) < challenge_score(p, t)


def test_image_pair_validation():
    ImagePair(np.zeros((4, 5, 3)), np.zeros((12, 15, 3)))
    with pytest.raises(ValueError):
        ImagePair(np.zeros((4, 5, 3)), np.zeros((12, 14, 3)))


def test_load_pairs_both_layouts(tmp_path, rng):
    hr = rng.integers(0, 256, (20, 19, 3), dtype=np.uint8)
    flat = tmp_path / "flat"
    flat.mkdir()
    save_png(hr, flat / "one.png")
    (pair,) = load_pairs(flat)
    assert pair.hr.shape == (18, 18, 3) and pair.lr.shape == (6, 6, 3)
    assert pair.id == "one"

    nested = tmp_path / "nested"
    (nested / "HR").mkdir(parents=True)
    (nested / "LR").mkdir()
    save_png(hr[:18, :18], nested / "HR" / "x.png")
    save_png(hr[:6, :6], nested / "LR" / "x.png")
    (pair,) = load_pairs(nested)
    np.testing.assert_array_equal(to_uint8(pair.lr), hr[:6, :6])


def test_synthetic_dataset_deterministic():
    a, b = synthetic_dataset(2, 30, seed=3), synthetic_dataset(2, 30, seed=3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
        assert x.shape == (30, 30, 3) and x.min() >= 0 and x.max() <= 1
