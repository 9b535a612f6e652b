"""Stabilizer loop: pre-shift, NURD estimate, sheath rotation, PI fusion, rewarp.

Within one step all warps are expressed relative to the pre-shifted frame:
the NURD estimate aligns it to the last stabilized frame, and the overall
rotation enters as its remainder after the pre-shift. The fused residual warp
is applied once (linear interpolation) and the total correction reported for
the raw frame is the pre-shift composed with that residual.
"""
from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from .correlation import CorrelationConfig, correlation_map
from .errors import ConfigError, ContractViolation, EstimationUnavailable
from .frames import FrameStream, Interp, ScanMode, _pixels, apply_warp, compose_warps
from .gs import GsConfig, GsEstimator
from .sheath import ReferenceStack, RotationState, SheathMask, match_rotation, reference_index

log = logging.getLogger(__name__)

Estimator = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class FusionConfig:
    kp: float = 0.95
    ki: float = 0.02
    estimator: str = "cnn"  # "cnn" or "gs"
    overall_rotation_enabled: bool = True
    nurd_enabled: bool = True
    interpolation: Interp = Interp.LINEAR
    rotation_window: int = 32
    buffer_length: int = 3
    integral_clamp: float | None = None  # default H/4

    def validate(self) -> None:
        if not 0.0 <= self.kp <= 1.0:
            raise ConfigError("kp must lie in [0, 1]")
        if not (self.ki >= 0.0 and np.isfinite(self.ki)):
            raise ConfigError("ki must be a finite nonnegative number")
        if self.estimator not in ("cnn", "gs"):
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.rotation_window < 1 or self.buffer_length < 1:
            raise ConfigError("rotation_window and buffer_length must be positive")


def pi_fuse(p_bar, r_bar: float, integral, kp: float, ki: float,
            clamp: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Discrete PI complementary filter.

    P_hat = kp * P_bar + (1 - kp) * r_bar + ki * I_prev, then
    I = I_prev + (r_bar - P_hat), optionally clamped to [-clamp, clamp].
    """
    p_bar = np.asarray(p_bar, dtype=np.float64)
    integral = np.asarray(integral, dtype=np.float64)
    if p_bar.shape != integral.shape or p_bar.ndim != 1:
        raise ContractViolation("P_bar and I must be vectors of equal length")
    if not (np.all(np.isfinite(p_bar)) and np.all(np.isfinite(integral)) and np.isfinite(r_bar)):
        raise ContractViolation("pi_fuse inputs must be finite")
    p_hat = kp * p_bar + (1.0 - kp) * r_bar + ki * integral
    new_i = integral + (r_bar - p_hat)
    if clamp is not None:
        new_i = np.clip(new_i, -clamp, clamp)
    return p_hat, new_i


@dataclass
class StabilizerState:
    last_stabilized: np.ndarray | None = None
    rotation: RotationState = field(default_factory=RotationState)
    integral: np.ndarray | None = None
    k: int = 0


@dataclass
class StepRecord:
    k: int
    delta_r: float
    r_bar: float
    p_min: float
    p_max: float
    p_mean: float
    estimator_ok: bool = True
    rotation_ok: bool = True

    FIELDS = ("k", "delta_r", "r_bar", "p_min", "p_max", "p_mean")


@dataclass
class StepResult:
    frame: np.ndarray
    total_warp: np.ndarray
    residual_warp: np.ndarray
    nurd: np.ndarray
    record: StepRecord


class CnnEstimator:
    def __init__(self, net):
        self.net = net

    def __call__(self, cmap: np.ndarray) -> np.ndarray:
        return self.net.predict(cmap)


class Stabilizer:
    """Causal, single-stream stabilizer. Feed raw frames in order to ``step``."""

    def __init__(self, cfg: FusionConfig = FusionConfig(), estimator: Estimator | None = None,
                 reference: ReferenceStack | None = None, mask: SheathMask = SheathMask(),
                 corr_cfg: CorrelationConfig = CorrelationConfig(),
                 scan_mode: ScanMode | str = ScanMode.ROBOTIC_OUTER_PULLBACK, stream_length: int | None = None,
                 gs_cfg: GsConfig = GsConfig()):
        cfg.validate()
        self.cfg = cfg
        self.scan_mode = ScanMode(scan_mode)
        if estimator is None and cfg.nurd_enabled:
            if cfg.estimator == "cnn":
                raise ConfigError("the cnn estimator needs a trained model")
            estimator = GsEstimator(gs_cfg)
        self.estimator = estimator
        if (self.scan_mode is ScanMode.INTERNAL_PULLBACK and cfg.overall_rotation_enabled
                and reference is None):
            raise ConfigError("internal pullback needs a calibrated reference stack")
        self.reference = reference
        self.mask = mask
        self.corr_cfg = corr_cfg
        self.stream_length = stream_length
        self.state = StabilizerState(rotation=RotationState(window=cfg.rotation_window))
        self._bands: deque[tuple[int, np.ndarray]] = deque(maxlen=cfg.buffer_length)

    # ------------------------------------------------------------------ pieces
    def _estimate_nurd(self, frame: np.ndarray) -> tuple[np.ndarray, bool]:
        H = frame.shape[0]
        if not self.cfg.nurd_enabled:
            return np.zeros(H), True
        try:
            cmap = correlation_map(frame, self.state.last_stabilized, self.corr_cfg)
            p = np.asarray(self.estimator(cmap), dtype=np.float64)
            if p.shape != (H,) or not np.all(np.isfinite(p)):
                raise EstimationUnavailable(f"estimator returned an invalid vector of shape {p.shape}")
            return p, True
        except Exception as exc:  # keep the stream going
            log.warning("frame %d: NURD estimator failed (%s); using a zero vector", self.state.k, exc)
            return np.zeros(H), False

    def _rotation_increment(self, pre: int) -> tuple[float, bool]:
        if not self.cfg.overall_rotation_enabled:
            return 0.0, True
        idx = [j for j, _ in self._bands]
        buf = np.stack([np.roll(b, pre, axis=0) for _, b in self._bands])
        ref_idx = [reference_index(len(self.reference), j, self.scan_mode, self.stream_length) for j in idx]
        ref = self.reference.buffer(ref_idx, self.mask)
        try:
            s = match_rotation(buf, ref, self.cfg.rotation_window)
        except EstimationUnavailable as exc:
            log.warning("frame %d: overall rotation unavailable (%s); keeping previous", self.state.k, exc)
            return 0.0, False
        # buffer ~ reference rolled by s, so rolling back by -s aligns it
        return float(-s), True

    # -------------------------------------------------------------------- step
    def step(self, raw) -> StepResult:
        frame = _pixels(raw)
        H, W = frame.shape
        st = self.state
        if st.k == 0:
            if self.reference is None and self.cfg.overall_rotation_enabled:
                self.reference = ReferenceStack.from_frame(frame, self.cfg.buffer_length)
            if self.cfg.overall_rotation_enabled:
                self.mask.validate(W)
                if self.reference.frames.shape[1:] != (H, W):
                    raise ContractViolation("reference stack frame shape differs from the stream")
                self._bands.append((0, self.mask.band(frame).copy()))
            st.last_stabilized = frame.copy()
            st.integral = np.zeros(H)
            st.k = 1
            zero = np.zeros(H)
            rec = StepRecord(0, 0.0, 0.0, 0.0, 0.0, 0.0)
            return StepResult(frame.copy(), zero, zero, zero, rec)
        if frame.shape != st.last_stabilized.shape:
            raise ContractViolation(f"frame {st.k} has shape {frame.shape}, stream has {st.last_stabilized.shape}")

        pre = int(np.round(st.rotation.total))
        shifted = np.roll(frame, pre, axis=0) if pre else frame
        p_bar, est_ok = self._estimate_nurd(shifted)

        rot_ok = True
        delta = 0.0
        if self.cfg.overall_rotation_enabled:
            self._bands.append((st.k, self.mask.band(frame).copy()))
            delta, rot_ok = self._rotation_increment(pre)
        st.rotation.update(delta)

        clamp = self.cfg.integral_clamp if self.cfg.integral_clamp is not None else H / 4
        residual, st.integral = pi_fuse(p_bar, st.rotation.total - pre, st.integral, self.cfg.kp, self.cfg.ki, clamp)
        out = apply_warp(shifted, residual, self.cfg.interpolation)
        total = compose_warps(np.full(H, float(pre)), residual)
        rec = StepRecord(st.k, delta, st.rotation.total, float(total.min()), float(total.max()),
                         float(total.mean()), est_ok, rot_ok)
        st.last_stabilized = out
        st.k += 1
        return StepResult(out, total, residual, p_bar, rec)

    def run_iter(self, frames: Iterable) -> Iterator[StepResult]:
        """Lazily stabilize; each result is produced before the next frame is read."""
        for f in frames:
            yield self.step(f)

    def run(self, stream: FrameStream | Iterable) -> tuple[FrameStream, list[StepResult]]:
        frames = stream.frames if isinstance(stream, FrameStream) else stream
        results = list(self.run_iter(frames))
        if not results:
            raise ContractViolation("empty stream")
        vol = np.stack([r.frame for r in results]).astype(np.float32)
        mode = stream.scan_mode if isinstance(stream, FrameStream) else self.scan_mode
        return FrameStream.from_array(vol, mode), results


def write_log(path, results: Iterable[StepResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(StepRecord.FIELDS)
        for r in results:
            rec = r.record
            w.writerow([rec.k] + [repr(float(getattr(rec, f))) for f in StepRecord.FIELDS[1:]])
