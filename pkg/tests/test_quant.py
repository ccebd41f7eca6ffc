import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xcat.config import PRESETS, XcatConfig, get_preset
from xcat.data import bicubic_downsample, synthetic_dataset
from xcat.model import WeightFormatError, build, forward
from xcat.ops import nearest_upsample_reference
from xcat.quant import (
    UNIT,
    QuantParams,
    calibrate,
    dequantize,
    dequantize_value,
    load_qmodel,
    lr_to_uint8,
    qforward,
    quantize,
    quantize_model,
    quantize_value,
    quantize_weights,
    representative_search,
    requantize,
    round_half_away,
    save_qmodel,
)

BASELINE = json.loads((Path(__file__).parent / "data" / "qforward_baseline.json").read_text())


def zero_features(model):
    m = model.copy()
    for w in m.layers.values():
        if w.trainable:
            w.kernel[:] = 0
            w.bias[:] = 0
    return m


def small_lrs(n=2, seed=2, size=48):
    return [bicubic_downsample(i, 3)[None] for i in synthetic_dataset(n, size, seed=seed)]


def test_round_half_away():
    np.testing.assert_array_equal(round_half_away([0.5, 1.5, -0.5, -1.5, 2.4, -2.6]), [1, 2, -1, -2, 2, -3])


def test_quantize_value_examples():
    p = QuantParams(1 / 255, 0)
    assert quantize_value(1.0, p) == 255
    for zp in (0, 7, 128, 255):
        q = QuantParams(0.03, zp)
        assert quantize_value(0.0, q) == zp
        assert dequantize_value(zp, q) == 0.0


def test_quant_params_validation():
    with pytest.raises(ValueError):
        QuantParams(0.0, 0)
    with pytest.raises(ValueError):
        QuantParams(0.1, 256)


@pytest.mark.parametrize("lo,hi", [(0.0, 1.0), (-1.0, 1.0), (-0.3, 2.7), (-5.0, 0.0), (0.2, 0.9)])
def test_roundtrip_error_on_grid(lo, hi):
    p = QuantParams.from_range(lo, hi)
    r_lo, r_hi = dequantize(0, p), dequantize(255, p)
    grid = np.linspace(r_lo, r_hi, 20001)
    err = np.abs(dequantize(quantize(grid, p), p) - grid)
    assert err.max() <= p.scale / 2 * (1 + 1e-9)


def test_degenerate_range():
    p = QuantParams.from_range(0.0, 0.0)
    assert p == QuantParams(1 / 255, 0)
    assert quantize_value(0.0, p) == 0


@settings(max_examples=100, deadline=None)
@given(
    acc=st.lists(st.integers(-(2**20), 2**20), min_size=2, max_size=30),
    m=st.floats(1e-6, 10.0),
    zp=st.integers(0, 255),
)
def test_requantize_monotone(acc, m, zp):
    acc = np.sort(np.array(acc))
    q = requantize(acc, m, zp).astype(int)
    assert np.all(np.diff(q) >= 0)
    want = np.clip(round_half_away(acc * m) + zp, 0, 255)
    np.testing.assert_array_equal(q, want)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**16), spread=st.floats(0.01, 5.0), shift=st.floats(-2.0, 2.0))
def test_weight_quantization_idempotent(seed, spread, shift):
    w = np.random.default_rng(seed).normal(shift, spread, size=(4, 3, 3, 3))
    q1, p1 = quantize_weights(w)
    w1 = dequantize(q1, p1)
    q2, p2 = quantize_weights(w1)
    w2 = dequantize(q2, p2)
    q3, p3 = quantize_weights(w2)
    np.testing.assert_array_equal(q2, q3)
    np.testing.assert_array_equal(q1, q2)


def test_calibrate_empty():
    with pytest.raises(ValueError):
        calibrate(build(XcatConfig(), 0), [])


def test_calibrate_zero_image():
    m = zero_features(build(XcatConfig(), 0))
    rec = calibrate(m, [np.zeros((1, 4, 4, 3), np.float32)])
    for name in rec.ranges:
        assert rec.widened(name) == (0.0, 0.0)
    qm = quantize_model(m, rec)
    assert qm.edges["conv_in"] == QuantParams(1 / 255, 0)


def test_calibrate_merge_law():
    m = build(XcatConfig(), 0)
    a, b = small_lrs(2)
    joint = calibrate(m, [a, b])
    merged = calibrate(m, [a]).merge(calibrate(m, [b]))
    assert joint.ranges == merged.ranges
    for lo, hi in joint.ranges.values():
        assert lo <= hi


def test_calibrate_output_range(rng):
    m = build(XcatConfig(), 0)
    rec = calibrate(m, [rng.uniform(0, 1, (1, 8, 8, 3)).astype(np.float32)])
    lo, hi = rec.ranges["output"]
    assert 0.0 <= lo <= hi <= 1.0


def test_zero_weights_quantize_to_zero_point():
    m = zero_features(build(XcatConfig(), 0))
    qm = quantize_model(m, calibrate(m, small_lrs(1)))
    for name, layer in qm.layers.items():
        if layer.trainable:
            assert np.all(layer.kernel == layer.wparams.zero_point), name


def test_fixed_kernel_exact():
    m = build(XcatConfig(), 0)
    qm = quantize_model(m, calibrate(m, small_lrs(1)))
    up = qm.layers["upsample"]
    np.testing.assert_array_equal(dequantize(up.kernel, up.wparams), m.layers["upsample"].kernel)


def test_every_edge_has_params():
    for name in ("xcat", "B", "D", "G", "M"):
        m = build(get_preset(name), 0)
        rec = calibrate(m, small_lrs(1))
        qm = quantize_model(m, rec)
        assert set(qm.edges) == set(rec.ranges)


# concat merge (row M) routes the upsample branch through conv_out, so it is excluded
@pytest.mark.parametrize("name", ["xcat", "B", "C", "D", "F", "G", "hx-24x8-m6-straight"])
def test_qforward_zero_features_is_nearest_upsample(name, rng):
    m = zero_features(build(get_preset(name), 0))
    qm = quantize_model(m, calibrate(m, small_lrs(2)))
    for _ in range(5):
        x = rng.integers(0, 256, size=(1, 7, 6, 3), dtype=np.uint8)
        np.testing.assert_array_equal(qforward(qm, x), nearest_upsample_reference(x, 3))


def test_qforward_zero_image():
    m = build(XcatConfig(), 4)
    qm = quantize_model(m, calibrate(m, small_lrs(1)))
    out = qforward(qm, np.zeros((1, 5, 5, 3), np.uint8))
    assert out.shape == (1, 15, 15, 3) and not out.any()


def test_qforward_rejects_bad_input():
    m = build(XcatConfig(), 0)
    qm = quantize_model(m, calibrate(m, small_lrs(1)))
    with pytest.raises(ValueError):
        qforward(qm, np.zeros((1, 4, 4, 3), np.float32))
    del qm.edges["conv_in"]
    with pytest.raises(RuntimeError):
        qforward(qm, np.zeros((1, 4, 4, 3), np.uint8))


def test_qforward_tracks_float_model():
    b = BASELINE
    m = build(get_preset(b["preset"]), b["model_seed"], zero_init_output=False)
    for w in m.layers.values():
        if w.trainable:
            w.kernel *= b["kernel_scale"]
    lrs = [bicubic_downsample(i, 3)[None] for i in synthetic_dataset(3, 48, seed=b["data_seed"])]
    qm = quantize_model(m, calibrate(m, lrs))
    x = lrs[0]
    err = np.abs(dequantize(qforward(qm, lr_to_uint8(x)), qm.edges["output"]) - forward(m, x))
    print(f"float vs uint8: max {err.max():.6f} mean {err.mean():.6f}")
    assert err.max() <= b["max_abs_error"] + 0.5 / 255
    assert err.mean() <= b["mean_abs_error"] * 1.1


def test_qforward_deterministic():
    m = build(XcatConfig(), 1)
    qm = quantize_model(m, calibrate(m, small_lrs(1)))
    x = lr_to_uint8(small_lrs(1, seed=9)[0])
    np.testing.assert_array_equal(qforward(qm, x), qforward(qm, x))


def test_permutation_stages_preserve_bytes():
    from xcat.ops import depth_to_space
    from xcat.tensor import channel_concat, channel_rotate, channel_split

    x = np.random.default_rng(0).integers(0, 256, (1, 3, 3, 27), dtype=np.uint8)
    for y in (channel_rotate(x, 7), channel_concat(channel_split(x, [20, 7])), depth_to_space(x, 3)):
        assert y.dtype == np.uint8
        np.testing.assert_array_equal(np.sort(y, axis=None), np.sort(x, axis=None))


def test_qforward_invariant_to_same_ranges():
    m = build(XcatConfig(), 2)
    a = small_lrs(1)[0]
    rec1 = calibrate(m, [a])
    rec2 = calibrate(m, [np.concatenate([a, a])])
    assert rec1.ranges == rec2.ranges
    x = lr_to_uint8(small_lrs(1, seed=5)[0])
    np.testing.assert_array_equal(
        qforward(quantize_model(m, rec1), x), qforward(quantize_model(m, rec2), x)
    )


# -- representative search ------------------------------------------------------

def _val_pairs(n=2, seed=7):
    imgs = synthetic_dataset(n, 36, seed=seed)
    return [(bicubic_downsample(h, 3), h) for h in imgs]


def test_search_single_candidate():
    m = build(XcatConfig(), 0)
    res = representative_search(m, small_lrs(1), _val_pairs())
    assert res.best_index == 0 and len(res.scores) == 1


def test_search_tie_break():
    m = build(XcatConfig(), 0)
    a = small_lrs(1)[0]
    res = representative_search(m, [a, a.copy()], _val_pairs())
    assert res.scores[0] == res.scores[1]
    assert res.best_index == 0


def test_search_argmax_and_failures():
    m = build(XcatConfig(), 0)
    black = np.zeros((1, 16, 16, 3), np.float32)
    natural = small_lrs(1)[0]
    broken = np.zeros((1, 16, 16, 2), np.float32)
    res = representative_search(m, [black, broken, natural], _val_pairs())
    assert res.scores[1] == -math.inf
    assert all(res.scores[res.best_index] >= s for s in res.scores)
    assert res.best_index == int(np.argmax(res.scores))


def test_search_needs_inputs():
    m = build(XcatConfig(), 0)
    with pytest.raises(ValueError):
        representative_search(m, [], _val_pairs())
    with pytest.raises(ValueError):
        representative_search(m, small_lrs(1), [])


def test_search_report(tmp_path):
    m = build(XcatConfig(), 0)
    res = representative_search(m, small_lrs(3), _val_pairs(1))
    path = tmp_path / "search.csv"
    res.write_csv(path, ["a", "b", "c"])
    lines = path.read_text().splitlines()
    assert lines[0] == "candidate,psnr"
    assert len(lines) == 5
    assert lines[-1] == f"# best,{'abc'[res.best_index]}"


# -- quantized files ---------------------------------------------------------------

@pytest.mark.parametrize("name", ["xcat", "B", "D", "M"])
def test_qmodel_roundtrip(tmp_path, name):
    m = build(get_preset(name), 0)
    qm = quantize_model(m, calibrate(m, small_lrs(1)))
    path = tmp_path / "q.hxq8"
    save_qmodel(qm, path)
    back = load_qmodel(path)
    assert back.config == qm.config
    assert back.edges == qm.edges
    for k, layer in qm.layers.items():
        b = back.layers[k]
        assert b.kernel.tobytes() == layer.kernel.tobytes()
        assert b.bias.tobytes() == layer.bias.tobytes()
        assert b.wparams == layer.wparams
    x = lr_to_uint8(small_lrs(1, seed=3)[0])
    np.testing.assert_array_equal(qforward(back, x), qforward(qm, x))
    save_qmodel(back, tmp_path / "again.hxq8")
    assert (tmp_path / "again.hxq8").read_bytes() == path.read_bytes()


def test_qmodel_corrupt(tmp_path):
    m = build(XcatConfig(), 0)
    qm = quantize_model(m, calibrate(m, small_lrs(1)))
    path = tmp_path / "q.hxq8"
    save_qmodel(qm, path)
    raw = path.read_bytes()
    for bad in (b"HXSR" + raw[4:], raw[:-3], raw[:40], raw + b"\0"):
        path.write_bytes(bad)
        with pytest.raises(WeightFormatError):
            load_qmodel(path)
