import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from nurdstab.errors import ContractViolation
from nurdstab.frames import BScan, FrameStream, Interp, apply_warp, compose_warps, invert_warp, psnr, wrap_warp


def _frame(rng, h=64, w=8):
    return rng.random((h, w))


def test_bscan_rejects_bad_height_and_range():
    with pytest.raises(ContractViolation):
        BScan(np.zeros((100, 4)))
    with pytest.raises(ContractViolation):
        BScan(np.full((64, 4), 1.5))
    with pytest.raises(ContractViolation):
        BScan(np.full((64, 4), np.nan))
    f = BScan(np.zeros((128, 4)), 3)
    assert (f.height, f.width, f.index) == (128, 4, 3)
    assert not f.pixels.flags.writeable


def test_stream_invariants():
    with pytest.raises(ContractViolation):
        FrameStream((BScan(np.zeros((64, 4)), 0), BScan(np.zeros((64, 5)), 1)))
    with pytest.raises(ContractViolation):
        FrameStream.from_array(np.zeros((2, 64, 4)), ground_truth_warps=[np.zeros(64)])
    s = FrameStream.from_array(np.zeros((3, 64, 4)), ground_truth_warps=[np.zeros(64)] * 3)
    assert len(s) == 3 and s.shape == (64, 4)


@pytest.mark.parametrize("mode", list(Interp))
def test_zero_warp_is_identity(rng, mode):
    f = _frame(rng)
    assert np.array_equal(apply_warp(f, np.zeros(64), mode), f)


@given(st.integers(-200, 200), st.sampled_from(list(Interp)))
def test_constant_integer_warp_is_roll(c, mode):
    f = np.random.default_rng(abs(c)).random((64, 5))
    out = apply_warp(f, np.full(64, float(c)), mode)
    assert np.array_equal(out, np.roll(f, c, axis=0))
    assert np.array_equal(apply_warp(out, np.full(64, float(-c)), Interp.NEAREST), f)


def test_half_shift_linear_example():
    col = np.array([[0.0], [1.0], [2.0], [3.0]])
    out = apply_warp(col, np.full(4, 0.5), Interp.LINEAR)
    # direct per-row resampling: row i blends rows i-1 and i (circularly) equally
    direct = np.array([[(col[(i - 1) % 4, 0] + col[i, 0]) / 2] for i in range(4)])
    assert np.allclose(out, direct)
    assert np.allclose(out[:, 0], [1.5, 0.5, 1.5, 2.5])


@given(arrays(np.float64, 64, elements=st.floats(-20, 20)))
def test_linear_output_between_neighbours(warp):
    f = np.random.default_rng(0).random((64, 3))
    out = apply_warp(f, warp, Interp.LINEAR)
    src = np.arange(64) - warp
    lo = np.mod(np.floor(src).astype(int), 64)
    hi = (lo + 1) % 64
    assert np.all(out >= np.minimum(f[lo], f[hi]))
    assert np.all(out <= np.maximum(f[lo], f[hi]))
    assert out.min() >= 0 and out.max() <= 1


def test_apply_warp_errors(rng):
    f = _frame(rng)
    with pytest.raises(ContractViolation):
        apply_warp(f, np.zeros(63))
    w = np.zeros(64)
    w[3] = np.inf
    with pytest.raises(ContractViolation):
        apply_warp(f, w)


def test_bscan_in_bscan_out(rng):
    b = BScan(_frame(rng), 7)
    out = apply_warp(b, np.full(64, 2.0))
    assert isinstance(out, BScan) and out.index == 7


def test_compose_trivial_cases(rng):
    b = rng.uniform(-5, 5, 16)
    assert np.allclose(compose_warps(np.zeros(16), b), b)
    assert np.array_equal(compose_warps(np.full(16, 3.0), np.full(16, -5.0)), np.full(16, -2.0))
    with pytest.raises(ContractViolation):
        compose_warps(np.zeros(4), np.zeros(5))


@pytest.mark.parametrize("h", [2, 3])
def test_compose_law_exhaustive_small(h):
    frame = np.arange(h, dtype=float)[:, None] / h
    values = range(-h, h)
    for a in itertools.product(values, repeat=h):
        for b in itertools.product(values, repeat=h):
            a_, b_ = np.array(a, float), np.array(b, float)
            twice = apply_warp(apply_warp(frame, a_, Interp.NEAREST), b_, Interp.NEAREST)
            once = apply_warp(frame, compose_warps(a_, b_), Interp.NEAREST)
            assert np.array_equal(twice, once)


@given(st.integers(5, 16), st.integers(0, 2**32 - 1))
def test_compose_law_random_integer(h, seed):
    r = np.random.default_rng(seed)
    frame = r.random((h, 2))
    a = r.integers(-3 * h, 3 * h, h).astype(float)
    b = r.integers(-3 * h, 3 * h, h).astype(float)
    twice = apply_warp(apply_warp(frame, a, Interp.NEAREST), b, Interp.NEAREST)
    assert np.array_equal(twice, apply_warp(frame, compose_warps(a, b), Interp.NEAREST))


def test_invert_warp_roundtrip():
    r = np.random.default_rng(3)
    from scipy.ndimage import gaussian_filter1d
    w = gaussian_filter1d(r.standard_normal(512), 16, mode="wrap")
    w *= 4 / np.abs(w).max()
    inv = invert_warp(w)
    # composing with the inverse is (nearly) the identity warp
    assert np.abs(wrap_warp(compose_warps(w, inv), 512)).max() < 0.05
    assert np.array_equal(invert_warp(np.full(64, 5.0)), np.full(64, -5.0))


def test_wrap_and_psnr():
    assert np.allclose(wrap_warp([0, 32, -33, 64], 64), [0, -32, 31, 0])
    assert psnr(np.zeros(4), np.zeros(4)) == np.inf
    assert psnr(np.zeros(4), np.full(4, 0.1)) == pytest.approx(20.0)
