import numpy as np
import pytest
from hypothesis import given, strategies as st

from nurdstab.errors import ContractViolation, MetricUnavailable
from nurdstab.frames import FrameStream
from nurdstab.metrics import MetricsConfig, colored_fraction, enface, local_fluctuation, metrics_report, nurd_mse, \
    precession, rgb_encode, stream_std, unstable_pixel_count, window_std


@pytest.mark.parametrize("value", [0.5, 0.4, 0.1, 0.7])
def test_constant_stream(value):
    v = np.full((12, 64, 8), value)
    r = stream_std(v)
    assert r.sigma == 0 and r.mpc_mean == 0
    assert len(r.unstable_counts) == 3


def test_alternating_pixel_population_std():
    v = np.full((10, 64, 8), 0.5)
    v[::2, 3, 4] = 0.0
    v[1::2, 3, 4] = 0.2
    std_map, sel = window_std(v)
    assert std_map[3, 4] == pytest.approx(0.1, abs=1e-12)
    # direct evaluation: sqrt(mean((x - mean)^2)) with mean 0.1
    series = v[:, 3, 4]
    assert std_map[3, 4] == pytest.approx(np.sqrt(np.mean((series - series.mean()) ** 2)))
    assert unstable_pixel_count(std_map, 0.05, sel) == 1


def test_threshold_limit():
    v = np.random.default_rng(0).uniform(0.2, 1, (10, 64, 8))
    std_map, sel = window_std(v)
    assert unstable_pixel_count(std_map, 1e-12, sel) == sel.sum()


def test_short_stream_rejected():
    with pytest.raises(ContractViolation):
        stream_std(np.zeros((5, 64, 4)))
    with pytest.raises(ContractViolation):
        MetricsConfig(std_window=1).validate()


def test_enface_examples():
    assert np.array_equal(enface(np.ones((4, 64, 5))), np.ones((64, 4)))
    v = np.zeros((3, 64, 5))
    v[:, 7] = 1
    e = enface(v)
    assert np.all(e[7] == 1) and e.sum() == 3


@given(st.integers(0, 2**31))
def test_enface_permutation_equivariance(seed):
    r = np.random.default_rng(seed)
    v = r.random((4, 64, 6))
    perm = r.permutation(64)
    assert np.array_equal(enface(v[:, perm]), enface(v)[perm])


def _ridge_stream(positions, h=512, w=4):
    v = np.full((len(positions), h, w), 0.1)
    rows = np.arange(h)
    for k, p in enumerate(positions):
        d = np.minimum(np.abs(rows - p) % h, h - np.abs(rows - p) % h)
        v[k] += 0.8 * np.exp(-0.5 * (d / 3.0) ** 2)[:, None]
    return v


def test_stationary_ridge():
    e = enface(_ridge_stream([100] * 20))
    assert precession(e) == 0
    assert local_fluctuation(e) == (0.0, 0.0)


def test_linear_drift_precession_across_seam():
    h, n, delta = 512, 500, 0.264
    pos = (480 + delta * np.arange(n)) % h  # crosses the seam
    e = enface(_ridge_stream(pos, h))
    injected = (n - 1) * delta * 360 / h
    assert precession(e) == pytest.approx(injected, rel=0.10)


def test_drift_shifted_stream_ridge_follows():
    base = _ridge_stream([50])[0]
    v = np.stack([np.roll(base, 3 * k, axis=0) for k in range(10)])
    e = enface(v)
    assert list(e.argmax(axis=0)) == [50 + 3 * k for k in range(10)]


def test_alternating_ridge_fluctuation():
    h = 512
    e = enface(_ridge_stream([200 if k % 2 == 0 else 202 for k in range(30)], h))
    mean, std = local_fluctuation(e)
    assert mean == pytest.approx(2 * 360 / h)
    assert std == pytest.approx(0.0, abs=1e-12)


def test_smooth_drift_fluctuation():
    h, delta = 512, 1.0
    e = enface(_ridge_stream(100 + delta * np.arange(40), h))
    assert local_fluctuation(e)[0] == pytest.approx(delta * 360 / h)


def test_flat_enface_unavailable():
    with pytest.raises(MetricUnavailable):
        precession(np.ones((64, 10)))
    with pytest.raises(MetricUnavailable):
        local_fluctuation(np.ones((64, 10)))


def test_rgb():
    f = np.random.default_rng(1).random((64, 8))
    rgb = rgb_encode(np.stack([f, f, f]), 0)
    assert np.array_equal(rgb[..., 0], rgb[..., 1]) and np.array_equal(rgb[..., 1], rgb[..., 2])
    assert colored_fraction(rgb) == 0
    shifted = rgb_encode(np.stack([f, np.roll(f, 2, axis=0), f]), 0)
    assert colored_fraction(shifted) > 0
    with pytest.raises(ContractViolation):
        rgb_encode(np.stack([f, f, f]), 1)


def test_nurd_mse():
    est = np.zeros((3, 512))
    mse, per = nurd_mse(est + 1.0, est)
    assert mse == pytest.approx((360 / 512) ** 2)
    assert mse == pytest.approx(0.494, abs=5e-4)
    assert nurd_mse(est, est)[0] == 0
    with pytest.raises(ContractViolation):
        nurd_mse(np.zeros((2, 4)), np.zeros((3, 4)))


def test_report_fields():
    s = FrameStream.from_array(_ridge_stream([10 + k for k in range(12)], 64).clip(0, 1))
    rep = metrics_report(s)
    assert set(rep) == {"sigma", "mpc_mean", "mpc_std", "precession_deg", "local_fluct_mean_deg",
                        "local_fluct_std_deg", "nurd_mse_deg2"}
    assert rep["nurd_mse_deg2"] is None
    assert rep["precession_deg"] == pytest.approx(11 * 360 / 64, rel=0.1)
