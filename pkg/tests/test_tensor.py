import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xcat.tensor import channel_concat, channel_rotate, channel_split, check_tensor


def _rand(rng, c, n=2, h=3, w=4):
    return rng.normal(size=(n, h, w, c)).astype(np.float32)


def _rotate_oracle(t, k):
    c = t.shape[-1]
    out = np.empty_like(t)
    for co in range(c):
        out[..., co] = t[..., (co - k) % c]
    return out


def test_check_tensor_rejects_bad_shapes():
    with pytest.raises(ValueError):
        check_tensor(np.zeros((3, 3, 3)))
    with pytest.raises(ValueError):
        check_tensor(np.zeros((1, 0, 3, 3)))
    with pytest.raises(ValueError):
        check_tensor(np.zeros((1, 1, 1, 1), dtype=np.int16))


def test_rotate_full_turn_is_identity(rng):
    t = _rand(rng, 28)
    np.testing.assert_array_equal(channel_rotate(t, 28), t)


def test_rotate_quarter_four_times_is_identity(rng):
    t = _rand(rng, 28)
    r = t
    for _ in range(4):
        r = channel_rotate(r, 7)
    np.testing.assert_array_equal(r, t)


def test_rotate_by_one_on_four_channels():
    t = np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32).reshape(1, 1, 1, 4)
    np.testing.assert_array_equal(channel_rotate(t, 1).ravel(), [4.0, 1.0, 2.0, 3.0])
    np.testing.assert_array_equal(channel_rotate(t, 1), _rotate_oracle(t, 1))


@settings(max_examples=60, deadline=None)
@given(c=st.integers(1, 40), k=st.integers(-100, 100), seed=st.integers(0, 2**16))
def test_rotate_properties(c, k, seed):
    t = _rand(np.random.default_rng(seed), c, n=1, h=2, w=2)
    r = channel_rotate(t, k)
    np.testing.assert_array_equal(r, _rotate_oracle(t, k))
    np.testing.assert_array_equal(channel_rotate(r, -k), t)
    np.testing.assert_array_equal(np.sort(r, axis=-1), np.sort(t, axis=-1))
    assert r.shape == t.shape


@pytest.mark.parametrize("sizes", [[21, 7], [16, 12], [28]])
def test_split_sizes(rng, sizes):
    t = _rand(rng, 28)
    parts = channel_split(t, sizes)
    assert [p.shape[-1] for p in parts] == sizes
    assert all(p.shape[:3] == t.shape[:3] for p in parts)
    np.testing.assert_array_equal(channel_concat(parts), t)


def test_split_single_part_is_identity(rng):
    t = _rand(rng, 8)
    (only,) = channel_split(t, [8])
    np.testing.assert_array_equal(only, t)


def test_split_mismatch():
    t = np.zeros((1, 2, 2, 28), np.float32)
    with pytest.raises(ValueError):
        channel_split(t, [20, 7])
    with pytest.raises(ValueError):
        channel_split(t, [28, 0])


@settings(max_examples=50, deadline=None)
@given(sizes=st.lists(st.integers(1, 6), min_size=1, max_size=5), seed=st.integers(0, 2**16))
def test_concat_split_roundtrip(sizes, seed):
    t = _rand(np.random.default_rng(seed), sum(sizes), n=1)
    np.testing.assert_array_equal(channel_concat(channel_split(t, sizes)), t)


def test_concat_constants():
    a = np.full((1, 2, 2, 1), 3.0, np.float32)
    b = np.full((1, 2, 2, 1), 5.0, np.float32)
    out = channel_concat([a, b])
    assert out.shape == (1, 2, 2, 2)
    np.testing.assert_array_equal(out[0, 1, 0], [3.0, 5.0])
    np.testing.assert_array_equal(channel_concat([a]), a)


def test_concat_rejects_mismatch():
    a = np.zeros((1, 2, 2, 1), np.float32)
    with pytest.raises(ValueError):
        channel_concat([a, np.zeros((1, 3, 2, 1), np.float32)])
    with pytest.raises(ValueError):
        channel_concat([a, np.zeros((1, 2, 2, 1), np.uint8)])
    with pytest.raises(ValueError):
        channel_concat([])
