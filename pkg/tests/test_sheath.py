import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nurdstab.errors import CalibrationError, ContractViolation, EstimationUnavailable
from nurdstab.frames import ScanMode
from nurdstab.phantom import PhantomConfig, flat_target_stack, phantom_stream
from nurdstab.sheath import ReferenceStack, RotationState, SheathMask, calibrate_reference, match_rotation, \
    reference_index, rotation_distances


def textured_band(seed, h=256, w=32):
    from scipy.ndimage import gaussian_filter
    r = np.random.default_rng(seed)
    return gaussian_filter(r.random((h, w)), (2, 1), mode="wrap")


def test_identical_inputs_have_zero_distance_at_zero():
    b = textured_band(0)
    d = rotation_distances(b, b, center=False)
    assert d[0] == 0.0
    assert min(d.values()) == 0.0 and sorted(d) == list(range(-31, 32))
    assert match_rotation(b, b) == 0


def test_shift_recovery_monte_carlo():
    hits = 0
    trials = 200
    for t in range(trials):
        r = np.random.default_rng(100 + t)
        ref = r.random((256, 32))
        buf = np.roll(ref, 4, axis=0) + r.normal(0, 0.01, ref.shape)
        hits += match_rotation(buf, ref) == 4
    assert hits / trials >= 0.95


@given(st.integers(-20, 20), st.integers(-8, 8), st.integers(0, 10_000))
def test_equivariance(s, t, seed):
    ref = textured_band(seed, h=128, w=8)
    buf = np.roll(ref, s, axis=0)
    assert match_rotation(buf, ref) == s
    assert match_rotation(np.roll(buf, t, axis=0), ref) == s + t


def test_joint_buffer_uses_all_frames():
    refs = np.stack([textured_band(i, 128, 8) for i in range(3)])
    buf = np.roll(refs, -6, axis=1)
    assert match_rotation(buf, refs) == -6


def test_periodic_band_tie_breaks_to_smallest_shift():
    base = textured_band(3, 8, 6)
    band = np.tile(base, (16, 1))  # period 8 rows: shifts 0 and +-8 tie
    assert match_rotation(band, band) == 0
    assert match_rotation(np.roll(band, 8, axis=0), band) == 0


def test_featureless_band_is_unavailable():
    with pytest.raises(EstimationUnavailable):
        match_rotation(np.full((64, 8), 0.4), np.full((64, 8), 0.4))
    with pytest.raises(ContractViolation):
        match_rotation(np.zeros((64, 8)), np.zeros((64, 9)))


def test_rotation_state():
    st_ = RotationState(window=4)
    st_.update(3)
    st_.update(-1)
    assert st_.total == 2 and st_.last_increment == -1
    with pytest.raises(ContractViolation):
        st_.update(5)


def test_mask_validation():
    with pytest.raises(ContractViolation):
        SheathMask(10, 5).validate()
    with pytest.raises(ContractViolation):
        SheathMask(8, 40).band(np.zeros((64, 30)))
    assert SheathMask(2, 5).band(np.ones((64, 10))).shape == (64, 3)


def test_reference_index(caplog):
    assert reference_index(5, 123, ScanMode.ROBOTIC_OUTER_PULLBACK, 500) == 0
    assert reference_index(5, 123, ScanMode.STATIONARY, 500) == 0
    assert [reference_index(5, k, ScanMode.INTERNAL_PULLBACK, 10) for k in range(10)] == \
        [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]
    with caplog.at_level(logging.WARNING):
        assert reference_index(5, 12, ScanMode.INTERNAL_PULLBACK, 10) == 4
    assert "reference" in caplog.text


def test_phantom_sheath_rotation():
    s = phantom_stream(2, PhantomConfig(height=256, width=64, sheath=(4, 20)), seed=3)
    band = SheathMask(4, 20).band(s[0])
    assert match_rotation(np.roll(band, -9, axis=0), band) == -9


CAL_CFG = PhantomConfig(height=256, width=128, sheath=(4, 20))


def test_calibration_removes_rotation():
    rotations = np.random.default_rng(0).integers(-20, 21, 8)
    raw = flat_target_stack(8, rotations, CAL_CFG, distance=40, seed=1)
    stack, report = calibrate_reference(raw, SheathMask(4, 20), surface_band=(24, 128))
    assert len(stack) == 8
    # independent check against the injected rotations: the corrections cancel them up to a common offset
    residual = np.asarray(report.per_frame_rotation) + rotations
    true_before = np.ptp(rotations) * 360 / 256
    true_after = np.ptp(residual) * 360 / 256
    assert true_after <= 0.05 * true_before
    assert report.residual_before_deg == pytest.approx(true_before, abs=2 * 360 / 256)
    assert report.residual_after_deg <= 0.05 * report.residual_before_deg


def test_calibration_names_the_noise_frame():
    raw = flat_target_stack(5, [0, 3, -2, 5, 1], CAL_CFG, distance=40, noise_frames=(3,), seed=2)
    with pytest.raises(CalibrationError) as info:
        calibrate_reference(raw, SheathMask(4, 20), surface_band=(24, 128))
    assert info.value.frame == 3
    assert "3" in str(info.value)


def test_reference_stack_contract():
    with pytest.raises(ContractViolation):
        ReferenceStack(np.zeros((3, 64, 8)), buffer_length=4)
    s = ReferenceStack.from_frame(np.zeros((64, 8)))
    assert len(s) == 1
