"""Overall rotation from the sheath band, and reference-stack calibration."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import CalibrationError, ContractViolation, EstimationUnavailable
from .frames import FrameStream, ScanMode, _pixels

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SheathMask:
    r0: int = 8
    r1: int = 40

    def validate(self, width: int | None = None) -> None:
        if not 0 <= self.r0 < self.r1:
            raise ContractViolation(f"sheath mask needs 0 <= r0 < r1, got [{self.r0}, {self.r1})")
        if width is not None and self.r1 > width:
            raise ContractViolation(f"sheath mask end {self.r1} exceeds frame width {width}")

    def band(self, frame) -> np.ndarray:
        px = _pixels(frame)
        self.validate(px.shape[1])
        return px[:, self.r0:self.r1]


@dataclass
class RotationState:
    total: float = 0.0  # accumulated overall rotation, A-line units
    last_increment: float = 0.0
    window: int = 32

    def update(self, increment: float) -> None:
        if abs(increment) > self.window:
            raise ContractViolation(f"rotation increment {increment} exceeds window {self.window}")
        self.last_increment = float(increment)
        self.total += float(increment)


def _center(bands: np.ndarray) -> np.ndarray:
    return bands - bands.mean(axis=(1, 2), keepdims=True)


def rotation_distances(buffer, reference, window: int = 32, center: bool = True) -> dict[int, float]:
    """d_r for every integer shift r in (-window, window): distance between the
    reference rolled by r rows and the buffer, summed jointly over all frames."""
    buf = np.asarray(buffer, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if buf.ndim == 2:
        buf, ref = buf[None], ref[None]
    if buf.shape != ref.shape:
        raise ContractViolation(f"buffer {buf.shape} and reference {ref.shape} differ in shape")
    if buf.size == 0:
        raise EstimationUnavailable("empty sheath band")
    scale = max(float(np.abs(buf).max()), float(np.abs(ref).max()), 1e-300)
    if center:
        buf, ref = _center(buf), _center(ref)
    if np.abs(buf).max() <= 1e-9 * scale or np.abs(ref).max() <= 1e-9 * scale:
        raise EstimationUnavailable("sheath band carries no texture")
    return {r: float(np.sqrt(np.sum((np.roll(ref, r, axis=1) - buf) ** 2)))
            for r in range(-window + 1, window)}


def match_rotation(buffer, reference, window: int = 32, center: bool = True) -> int:
    """Shift s such that the buffer best matches the reference rolled by s rows.

    ``buffer`` and ``reference`` are (l, H, band) stacks or single (H, band)
    bands. Ties go to the smaller |s|, then to the negative side.
    """
    d = rotation_distances(buffer, reference, window, center)
    return min(d, key=lambda r: (d[r], abs(r), r))


@dataclass
class ReferenceStack:
    frames: np.ndarray  # (N, H, W) calibrated frames
    buffer_length: int = 3
    rotations: np.ndarray | None = None  # per-frame rotation applied by calibration
    residual_before_deg: float | None = None
    residual_after_deg: float | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3 or len(self.frames) < 1:
            raise ContractViolation("reference stack needs at least one (H, W) frame")
        if not 1 <= self.buffer_length <= len(self.frames) and len(self.frames) > 1:
            raise ContractViolation("buffer length must lie in [1, N]")
        self.frames.setflags(write=False)

    def __len__(self) -> int:
        return len(self.frames)

    @classmethod
    def from_frame(cls, frame, buffer_length: int = 3) -> "ReferenceStack":
        return cls(_pixels(frame)[None], buffer_length=buffer_length)

    def index(self, k: int, mode: ScanMode | str, stream_length: int | None = None) -> int:
        return reference_index(len(self), k, mode, stream_length)

    def buffer(self, indices, mask: SheathMask) -> np.ndarray:
        return np.stack([mask.band(self.frames[i]) for i in indices])


def reference_index(n_ref: int, k: int, mode: ScanMode | str, stream_length: int | None = None) -> int:
    """Robotic and stationary scans always use frame 0; internal pullback maps k
    proportionally onto the N reference frames (equal-interval assumption)."""
    if k < 0:
        raise ContractViolation("frame index must be nonnegative")
    mode = ScanMode(mode)
    if mode is not ScanMode.INTERNAL_PULLBACK:
        return 0
    length = stream_length or n_ref
    idx = (k * n_ref) // length
    if idx >= n_ref:
        log.warning("frame %d maps past the reference stack (N=%d); using the last reference", k, n_ref)
        idx = n_ref - 1
    return idx


def select_reference(stack: ReferenceStack, k: int, mode: ScanMode | str,
                     stream_length: int | None = None) -> np.ndarray:
    return stack.frames[stack.index(k, mode, stream_length)]


# --------------------------------------------------------------- calibration

@dataclass
class CalibrationReport:
    residual_before_deg: float
    residual_after_deg: float
    per_frame_rotation: list[int] = field(default_factory=list)
    detected_fraction: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"residual_before_deg": self.residual_before_deg, "residual_after_deg": self.residual_after_deg,
                "per_frame_rotation": list(self.per_frame_rotation)}


def surface_profile(frame, band: tuple[int, int], min_fraction: float = 0.1, frame_index: int = 0,
                    snr: float = 8.0, floor: float = 0.05) -> np.ndarray:
    """Per-A-line depth of the strongest rising edge inside ``band``; NaN where no edge stands out.

    An edge counts when its gradient exceeds both ``floor`` and ``snr`` robust
    noise deviations of the gradient over the band.
    """
    px = _pixels(frame).astype(np.float64)
    s0, s1 = band
    if not 0 <= s0 < s1 <= px.shape[1] or s1 - s0 < 3:
        raise ContractViolation(f"surface band {band} invalid for width {px.shape[1]}")
    seg = gaussian_filter1d(px[:, s0:s1], 1.0, axis=1, mode="nearest")
    grad = np.diff(seg, axis=1)
    pos = grad.argmax(axis=1)
    strength = grad[np.arange(len(grad)), pos]
    mad = np.median(np.abs(grad - np.median(grad)))
    thresh = max(snr * 1.4826 * mad, floor)
    detected = strength > thresh
    if detected.mean() < min_fraction:
        raise CalibrationError(f"flat-target surface found in only {detected.mean():.1%} of A-lines",
                               frame=frame_index)
    return np.where(detected, s0 + pos + 0.5, np.nan)


def _profile_shift(profile: np.ndarray, target: np.ndarray, min_overlap: int) -> int:
    """Integer roll of ``profile`` minimizing mean |difference| to ``target``."""
    H = len(profile)
    best, best_key = 0, None
    for s in range(-H // 2, H // 2):
        d = np.roll(profile, s) - target
        ok = np.isfinite(d)
        n = int(ok.sum())
        if n < min_overlap:
            continue
        key = (float(np.abs(d[ok]).mean()), abs(s), s)
        if best_key is None or key < best_key:
            best, best_key = s, key
    return best


def _align(profiles: list[np.ndarray], refine: int = 2) -> np.ndarray:
    counts = [int(np.isfinite(p).sum()) for p in profiles]
    min_overlap = max(3, min(counts) // 2)
    rot = np.array([_profile_shift(p, profiles[0], min_overlap) for p in profiles])
    for _ in range(refine):
        stack = np.stack([np.roll(p, r) for p, r in zip(profiles, rot)])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN columns
            median = np.nanmedian(stack, axis=0)
        rot = np.array([_profile_shift(p, median, min_overlap) for p in profiles])
    return rot - int(np.round(np.median(rot)))


def calibrate_reference(raw_stack: FrameStream, mask: SheathMask = SheathMask(),
                        surface_band: tuple[int, int] = (48, 256), buffer_length: int = 3,
                        min_detected: float = 0.1) -> tuple[ReferenceStack, CalibrationReport]:
    """Rotate each raw reference frame so the flat-target contours coincide.

    Returns the calibrated stack and a report with the rotational spread of
    the stack before and after alignment, in degrees.
    """
    vol = raw_stack.volume(np.float64)
    H, W = vol.shape[1:]
    mask.validate(W)
    profiles = []
    fractions = []
    for k, f in enumerate(vol):
        p = surface_profile(f, surface_band, min_detected, frame_index=k)
        profiles.append(p)
        fractions.append(float(np.isfinite(p).mean()))
    rot = _align(profiles)
    aligned = np.stack([np.roll(f, r, axis=0) for f, r in zip(vol, rot)])
    check = _align([np.roll(p, r) for p, r in zip(profiles, rot)])
    deg = 360.0 / H
    report = CalibrationReport(residual_before_deg=float(np.ptp(rot) * deg),
                               residual_after_deg=float(np.ptp(check) * deg),
                               per_frame_rotation=[int(r) for r in rot], detected_fraction=fractions)
    stack = ReferenceStack(aligned, buffer_length=min(buffer_length, len(aligned)), rotations=rot,
                           residual_before_deg=report.residual_before_deg,
                           residual_after_deg=report.residual_after_deg)
    return stack, report
