"""Stability metrics for frame streams and NURD-estimation error."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import median_filter

from .errors import ContractViolation, MetricUnavailable
from .frames import FrameStream


@dataclass(frozen=True)
class MetricsConfig:
    std_window: int = 10
    unstable_threshold: float = 0.05
    mean_floor: float = 0.05  # pixels with window mean above this enter N_sig
    window_stride: int = 1
    max_flat_fraction: float = 0.2
    ridge_median: int = 5

    def validate(self) -> None:
        if self.std_window < 2:
            raise ContractViolation("std_window must be >= 2")
        if not self.unstable_threshold > 0:
            raise ContractViolation("unstable threshold must be positive")
        if self.window_stride < 1:
            raise ContractViolation("window_stride must be >= 1")


def _volume(stream) -> np.ndarray:
    if isinstance(stream, FrameStream):
        return stream.volume(np.float64)
    v = np.asarray(stream, dtype=np.float64)
    if v.ndim != 3:
        raise ContractViolation(f"expected a (K, H, W) stack, got shape {v.shape}")
    return v


def window_std(window: np.ndarray, cfg: MetricsConfig = MetricsConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel population STD over a (n, H, W) window and the mask of selected pixels."""
    window = np.asarray(window, dtype=np.float64)
    # shifting by the first frame keeps constant pixels exactly at zero
    return (window - window[0]).std(axis=0), window.mean(axis=0) > cfg.mean_floor


def unstable_pixel_count(std_map: np.ndarray, threshold: float, selected: np.ndarray | None = None) -> int:
    unstable = np.asarray(std_map) > threshold
    if selected is not None:
        unstable &= selected
    return int(unstable.sum())


@dataclass
class StdResult:
    sigma: float  # mean over windows of the per-window sigma
    sigma_windows: np.ndarray
    unstable_counts: np.ndarray  # per window
    n_selected: np.ndarray
    last_std_map: np.ndarray = field(repr=False, default=None)

    @property
    def mpc_mean(self) -> float:
        return float(self.unstable_counts.mean())

    @property
    def mpc_std(self) -> float:
        return float(self.unstable_counts.std())


def stream_std(stream, cfg: MetricsConfig = MetricsConfig()) -> StdResult:
    """Sliding-window sigma (mean per-pixel STD over selected pixels) and unstable counts."""
    cfg.validate()
    vol = _volume(stream)
    K = len(vol)
    if K < cfg.std_window:
        raise ContractViolation(f"stream of {K} frames is shorter than the STD window {cfg.std_window}")
    sig, counts, nsel = [], [], []
    std_map = None
    for s in range(0, K - cfg.std_window + 1, cfg.window_stride):
        std_map, sel = window_std(vol[s:s + cfg.std_window], cfg)
        n = int(sel.sum())
        sig.append(float(std_map[sel].mean()) if n else 0.0)
        counts.append(unstable_pixel_count(std_map, cfg.unstable_threshold, sel))
        nsel.append(n)
    return StdResult(float(np.mean(sig)), np.array(sig), np.array(counts), np.array(nsel), std_map)


def enface(stream) -> np.ndarray:
    """(H, K) projection: entry (i, k) is the mean of A-line i in frame k."""
    vol = _volume(stream)
    if len(vol) == 0:
        raise ContractViolation("empty stream")
    return vol.mean(axis=2).T


def ridge(enface_image: np.ndarray, max_flat_fraction: float = 0.2) -> np.ndarray:
    """Unwrapped per-column argmax row (jumps beyond H/4 between columns are held)."""
    img = np.asarray(enface_image, dtype=np.float64)
    H, K = img.shape
    scale = max(float(np.abs(img).max()), 1e-300)
    flat = np.ptp(img, axis=0) <= 1e-9 * scale
    if K == 0 or flat.mean() > max_flat_fraction:
        raise MetricUnavailable(f"{flat.mean():.0%} of en-face columns have no intensity maximum")
    pos = img.argmax(axis=0).astype(np.float64)
    out = np.empty(K)
    # seed with the first trackable column
    first = int(np.flatnonzero(~flat)[0])
    out[: first + 1] = pos[first]
    for k in range(first + 1, K):
        if flat[k]:
            out[k] = out[k - 1]
            continue
        d = (pos[k] - out[k - 1] + H / 2) % H - H / 2
        out[k] = out[k - 1] + (d if abs(d) <= H / 4 else 0.0)
    return out


def precession(enface_image: np.ndarray, cfg: MetricsConfig = MetricsConfig()) -> float:
    """Peak-to-peak excursion of the median-smoothed ridge, in degrees."""
    img = np.asarray(enface_image)
    r = ridge(img, cfg.max_flat_fraction)
    if cfg.ridge_median > 1:
        r = median_filter(r, size=cfg.ridge_median, mode="nearest")
    return float(np.ptp(r) * 360.0 / img.shape[0])


def local_fluctuation(enface_image: np.ndarray, cfg: MetricsConfig = MetricsConfig()) -> tuple[float, float]:
    """Mean and std of |ridge step| between neighbouring columns, in degrees."""
    img = np.asarray(enface_image)
    r = ridge(img, cfg.max_flat_fraction)
    if len(r) < 2:
        return 0.0, 0.0
    d = np.abs(np.diff(r)) * 360.0 / img.shape[0]
    return float(d.mean()), float(d.std())


def rgb_encode(stream, k: int) -> np.ndarray:
    """(H, W, 3) image with frames k, k+1, k+2 in the R, G, B channels."""
    vol = _volume(stream)
    if k < 0 or k + 2 >= len(vol):
        raise ContractViolation(f"rgb_encode needs frames {k}..{k + 2}, stream has {len(vol)}")
    return np.stack([vol[k], vol[k + 1], vol[k + 2]], axis=-1)


def colored_fraction(rgb: np.ndarray, threshold: float = 0.1) -> float:
    rgb = np.asarray(rgb)
    return float((np.ptp(rgb, axis=-1) > threshold).mean())


def nurd_mse(estimated, truth) -> tuple[float, np.ndarray]:
    """Mean squared error in degrees^2 over all frames and A-lines, plus per-frame means."""
    est = np.asarray(estimated, dtype=np.float64)
    tru = np.asarray(truth, dtype=np.float64)
    if est.shape != tru.shape or est.ndim != 2 or est.shape[0] == 0:
        raise ContractViolation(f"estimated {est.shape} and truth {tru.shape} must be equal (n, H) arrays")
    deg = 360.0 / est.shape[1]
    per_frame = np.mean(((est - tru) * deg) ** 2, axis=1)
    return float(per_frame.mean()), per_frame


def metrics_report(stream, cfg: MetricsConfig = MetricsConfig(), estimated=None, truth=None) -> dict:
    """Fields of metrics.json; NaN-free, missing metrics reported as null."""
    res = stream_std(stream, cfg)
    ef = enface(stream)
    out = {"sigma": res.sigma, "mpc_mean": res.mpc_mean, "mpc_std": res.mpc_std,
           "precession_deg": None, "local_fluct_mean_deg": None, "local_fluct_std_deg": None,
           "nurd_mse_deg2": None}
    try:
        out["precession_deg"] = precession(ef, cfg)
        out["local_fluct_mean_deg"], out["local_fluct_std_deg"] = local_fluctuation(ef, cfg)
    except MetricUnavailable:
        pass
    if estimated is not None and truth is not None:
        out["nurd_mse_deg2"] = nurd_mse(estimated, truth)[0]
    return out
