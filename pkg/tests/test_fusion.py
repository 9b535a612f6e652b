import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nurdstab.correlation import correlation_map
from nurdstab.errors import ConfigError, ContractViolation
from nurdstab.frames import FrameStream, Interp, ScanMode, apply_warp
from nurdstab.fusion import FusionConfig, Stabilizer, StepRecord, pi_fuse, write_log
from nurdstab.gs import GsEstimator
from nurdstab.metrics import enface, precession
from nurdstab.phantom import PhantomConfig, phantom_stream
from nurdstab.sheath import ReferenceStack, SheathMask
from nurdstab.synth import SynthConfig, distort_stream

SMALL = PhantomConfig(height=128, width=96, sheath=(6, 22))
MASK = SheathMask(6, 22)


def scalar_recurrence(p_bars, r_bars, kp, ki):
    """Element-by-element evaluation in plain floats."""
    h = len(p_bars[0])
    integral = [0.0] * h
    outs = []
    for p_bar, r in zip(p_bars, r_bars):
        p_hat = [kp * p_bar[i] + (1 - kp) * r + ki * integral[i] for i in range(h)]
        integral = [integral[i] + (r - p_hat[i]) for i in range(h)]
        outs.append((p_hat, integral))
    return outs


def test_hand_evaluated_recurrence():
    p1, i1 = pi_fuse([2.0, 0.0], 1.0, np.zeros(2), 0.5, 0.1)
    assert np.allclose(p1, [1.5, 0.5]) and np.allclose(i1, [-0.5, 0.5])
    p2, i2 = pi_fuse([2.0, 0.0], 1.0, i1, 0.5, 0.1)
    assert np.allclose(p2, [1.45, 0.55], atol=1e-12, rtol=0)
    # by hand: I2 = I1 + (1 - P2) = (-0.95, 0.95); P3 = (1.5, 0.5) + 0.1 * I2
    p3, i3 = pi_fuse([2.0, 0.0], 1.0, i2, 0.5, 0.1)
    assert np.allclose(p3, [1.405, 0.595], atol=1e-12, rtol=0)
    assert np.allclose(i3, [-1.355, 1.355], atol=1e-12, rtol=0)
    ref = scalar_recurrence([[2.0, 0.0]] * 3, [1.0] * 3, 0.5, 0.1)
    for (p, i), (p_ref, i_ref) in zip([(p1, i1), (p2, i2), (p3, i3)], ref):
        assert np.allclose(p, p_ref, atol=1e-12, rtol=0) and np.allclose(i, i_ref, atol=1e-12, rtol=0)


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.floats(-10, 10), st.floats(0, 1), st.floats(0, 1))
def test_matches_scalar_recurrence(p, r, kp, ki):
    out = scalar_recurrence([p] * 4, [r] * 4, kp, ki)
    integral = np.zeros(3)
    for p_hat_ref, i_ref in out:
        p_hat, integral = pi_fuse(p, r, integral, kp, ki)
        assert np.allclose(p_hat, p_hat_ref, atol=1e-12) and np.allclose(integral, i_ref, atol=1e-12)


def test_reductions():
    p = np.array([0.3, -1.7, 2.0])
    assert np.array_equal(pi_fuse(p, 5.0, np.array([1.0, 2.0, 3.0]), 1.0, 0.0)[0], p)
    assert np.array_equal(pi_fuse(p, 5.0, np.array([1.0, 2.0, 3.0]), 0.0, 0.0)[0], np.full(3, 5.0))


@given(st.lists(st.integers(-64, 64), min_size=1, max_size=20), st.integers(0, 8), st.integers(0, 8))
def test_fixed_point_exact(rs, kp8, ki8):
    # dyadic values keep every product and sum exact
    kp, ki = kp8 / 8, ki8 / 8
    integral = np.zeros(4)
    for r in rs:
        r = r / 4
        p_hat, integral = pi_fuse(np.full(4, r), r, integral, kp, ki)
        assert np.array_equal(p_hat, np.full(4, r))
        assert not integral.any()


@pytest.mark.parametrize("kp,ki", [(0.5, 0.1), (0.95, 0.02), (0.0, 0.3)])
def test_dc_tracking(kp, ki):
    c, p = 2.0, -1.5
    integral = np.zeros(8)
    for _ in range(500):
        p_hat, integral = pi_fuse(np.full(8, p), c, integral, kp, ki)
    assert np.abs(p_hat - c).max() < 1e-3


def test_integral_clamp_and_errors():
    _, i = pi_fuse(np.zeros(2), 100.0, np.zeros(2), 0.5, 0.1, clamp=8.0)
    assert np.array_equal(i, [8.0, 8.0])
    with pytest.raises(ContractViolation):
        pi_fuse(np.zeros(2), np.nan, np.zeros(2), 0.5, 0.1)
    with pytest.raises(ContractViolation):
        pi_fuse(np.zeros(2), 0.0, np.zeros(3), 0.5, 0.1)
    with pytest.raises(ConfigError):
        FusionConfig(kp=1.5).validate()
    with pytest.raises(ConfigError):
        FusionConfig(ki=-0.1).validate()


def test_config_errors():
    with pytest.raises(ConfigError):
        Stabilizer(FusionConfig(estimator="cnn"))
    with pytest.raises(ConfigError):
        Stabilizer(FusionConfig(estimator="gs"), scan_mode=ScanMode.INTERNAL_PULLBACK)


def gs_stabilizer(**kw):
    cfg = FusionConfig(estimator="gs", **kw)
    return Stabilizer(cfg, mask=MASK)


def test_identical_frames_fixed_point():
    f = phantom_stream(1, SMALL, seed=1)[0].pixels
    stab = gs_stabilizer()
    for k in range(6):
        res = stab.step(f)
        assert np.array_equal(res.frame, f)
        assert not res.total_warp.any()
    assert stab.state.rotation.total == 0


def test_first_frame_is_emitted_unchanged():
    s = phantom_stream(2, SMALL, seed=2)
    res = gs_stabilizer().step(s[0])
    assert np.array_equal(res.frame, s[0].pixels)


def test_kp_one_matches_estimator_only_pipeline():
    s = distort_stream(phantom_stream(8, SMALL, seed=3), SynthConfig(amplitude=3.0, seed=4))
    _, results = gs_stabilizer(kp=1.0, ki=0.0, overall_rotation_enabled=False).run(s)
    est = GsEstimator()
    prev = s[0].pixels
    for k in range(1, len(s)):
        raw = s[k].pixels
        out = apply_warp(raw, est(correlation_map(raw, prev)), Interp.LINEAR)
        assert np.array_equal(results[k].frame, out)
        prev = out


def test_ablation_switches_off_everything():
    s = distort_stream(phantom_stream(5, SMALL, seed=5), SynthConfig(amplitude=3.0, drift_per_frame=1.0, seed=6))
    out, _ = gs_stabilizer(overall_rotation_enabled=False, nurd_enabled=False).run(s)
    assert np.array_equal(out.volume(), s.volume())


@pytest.fixture(scope="module")
def drift_stream():
    cfg = PhantomConfig(height=256, width=96, sheath=(6, 22))
    src = phantom_stream(120, cfg, seed=7)
    return distort_stream(src, SynthConfig(amplitude=0.0, drift_per_frame=0.5, seed=8))


def test_constant_drift_is_tracked(drift_stream):
    _, results = gs_stabilizer().run(drift_stream)
    K = len(drift_stream) - 1
    # the correction undoes the drift, so it accumulates to -K * delta
    assert abs(results[-1].record.r_bar + K * 0.5) <= 2
    assert abs(results[-1].total_warp.mean() + K * 0.5) <= 2


def test_no_overall_ablation_leaves_precession(drift_stream):
    injected = precession(enface(drift_stream))
    out, _ = gs_stabilizer(overall_rotation_enabled=False).run(drift_stream)
    full, _ = gs_stabilizer().run(drift_stream)
    assert precession(enface(out)) >= 0.5 * injected
    assert precession(enface(full)) < 0.5 * injected


def test_causality():
    s = distort_stream(phantom_stream(6, SMALL, seed=9), SynthConfig(amplitude=2.0, seed=1))
    consumed = []

    def frames():
        for k, f in enumerate(s.frames):
            consumed.append(k)
            yield f

    for k, res in enumerate(gs_stabilizer().run_iter(frames())):
        # result k exists before frame k+1 has been read
        assert consumed[-1] == k
        assert res.record.k == k


def test_estimator_failure_falls_back(caplog):
    s = phantom_stream(3, SMALL, seed=2)

    def broken(cmap):
        raise RuntimeError("boom")

    stab = Stabilizer(FusionConfig(estimator="cnn", overall_rotation_enabled=False), estimator=broken, mask=MASK)
    with caplog.at_level(logging.WARNING):
        _, results = stab.run(s)
    assert "boom" in caplog.text
    assert not results[1].record.estimator_ok
    assert np.array_equal(results[1].frame, s[1].pixels)


def test_pullback_uses_reference_stack():
    s = phantom_stream(6, SMALL, seed=4)
    stack = ReferenceStack(s.volume()[:3], buffer_length=2)
    stab = Stabilizer(FusionConfig(estimator="gs"), reference=stack, mask=MASK,
                      scan_mode=ScanMode.INTERNAL_PULLBACK, stream_length=6)
    out, results = stab.run(FrameStream.from_array(s.volume(), ScanMode.INTERNAL_PULLBACK))
    assert len(results) == 6 and out.scan_mode is ScanMode.INTERNAL_PULLBACK
    with pytest.raises(ContractViolation):
        stab.step(np.zeros((64, 96)))


def test_log(tmp_path):
    s = phantom_stream(3, SMALL, seed=2)
    _, results = gs_stabilizer().run(s)
    write_log(tmp_path / "log.csv", results)
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == ",".join(StepRecord.FIELDS)
    assert len(lines) == 4
