"""Polar frame containers and A-line rewarping.

A frame is an H x W intensity grid: rows are A-lines (angular axis, periodic),
columns are depth samples. Warp vectors hold one angular offset per A-line in
A-line units; ``apply_warp`` uses pull semantics, i.e. output row ``i`` is
sampled from input position ``i - warp[i]`` (modulo H). A constant warp ``c``
is therefore ``np.roll(frame, c, axis=0)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractViolation


class ScanMode(str, enum.Enum):
    INTERNAL_PULLBACK = "InternalPullback"
    ROBOTIC_OUTER_PULLBACK = "RoboticOuterPullback"
    STATIONARY = "Stationary"


class Interp(str, enum.Enum):
    NEAREST = "nearest"
    LINEAR = "linear"


@dataclass(frozen=True)
class BScan:
    """One polar frame with pixel values normalized to [0, 1]."""

    pixels: np.ndarray
    index: int = 0

    def __post_init__(self):
        px = np.array(self.pixels, copy=True)
        if px.ndim != 2:
            raise ContractViolation(f"BScan pixels must be 2-D, got shape {px.shape}")
        h = px.shape[0]
        if h < 64 or h % 64:
            raise ContractViolation(f"BScan height must be a positive multiple of 64, got {h}")
        if not np.issubdtype(px.dtype, np.floating):
            px = px.astype(np.float64)
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ContractViolation("BScan pixels must be finite and within [0, 1]")
        if self.index < 0:
            raise ContractViolation("frame index must be nonnegative")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class FrameStream:
    frames: tuple[BScan, ...]
    scan_mode: ScanMode = ScanMode.ROBOTIC_OUTER_PULLBACK
    ground_truth_warps: tuple[np.ndarray, ...] | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "scan_mode", ScanMode(self.scan_mode))
        if frames:
            shape = frames[0].pixels.shape
            for k, f in enumerate(frames):
                if f.pixels.shape != shape:
                    raise ContractViolation(f"frame {k} has shape {f.pixels.shape}, expected {shape}")
                if f.index != frames[0].index + k:
                    raise ContractViolation("frame indices must be consecutive")
        if self.ground_truth_warps is not None:
            warps = tuple(np.asarray(w, dtype=np.float64) for w in self.ground_truth_warps)
            if len(warps) != len(frames):
                raise ContractViolation("ground_truth_warps must have one entry per frame")
            for w in warps:
                validate_warp(w, frames[0].height if frames else len(w))
            object.__setattr__(self, "ground_truth_warps", warps)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, k):
        return self.frames[k]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].pixels.shape

    def volume(self, dtype=np.float32) -> np.ndarray:
        """Frames stacked as a (K, H, W) array."""
        return np.stack([f.pixels for f in self.frames]).astype(dtype, copy=False)

    @classmethod
    def from_array(cls, volume, scan_mode=ScanMode.ROBOTIC_OUTER_PULLBACK, ground_truth_warps=None,
                   start_index: int = 0, meta=None) -> "FrameStream":
        frames = tuple(BScan(v, start_index + k) for k, v in enumerate(volume))
        return cls(frames, scan_mode, ground_truth_warps, dict(meta or {}))


def wrap_warp(values, height: int) -> np.ndarray:
    """Map angular offsets into [-H/2, H/2)."""
    v = np.asarray(values, dtype=np.float64)
    half = height / 2.0
    return np.mod(v + half, height) - half


def validate_warp(warp, height: int) -> np.ndarray:
    w = np.asarray(warp, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != height:
        raise ContractViolation(f"warp length {w.shape} does not match frame height {height}")
    if not np.all(np.isfinite(w)):
        raise ContractViolation("warp contains non-finite entries")
    return w


def _pixels(frame) -> np.ndarray:
    return frame.pixels if isinstance(frame, BScan) else np.asarray(frame)


def apply_warp(frame, warp, interpolation: Interp | str = Interp.LINEAR):
    """Resample A-lines: output row i takes the input at angular position (i - warp[i]) mod H.

    Accepts a ``BScan`` (returns a ``BScan``) or any array whose first axis is
    the angular axis (returns an array of the same dtype).
    """
    px = _pixels(frame)
    h = px.shape[0]
    w = validate_warp(warp, h)
    interpolation = Interp(interpolation)
    src = np.arange(h, dtype=np.float64) - w
    if interpolation is Interp.NEAREST:
        idx = np.mod(np.floor(src + 0.5).astype(np.int64), h)
        out = px[idx]
    else:
        lo = np.floor(src)
        frac = src - lo
        lo = np.mod(lo.astype(np.int64), h)
        hi = (lo + 1) % h
        a = px[lo].astype(np.float64, copy=False)
        b = px[hi].astype(np.float64, copy=False)
        f = frac.reshape((h,) + (1,) * (px.ndim - 1))
        out = a + f * (b - a)
        out = np.clip(out, np.minimum(a, b), np.maximum(a, b))
        if np.issubdtype(px.dtype, np.floating):
            out = out.astype(px.dtype, copy=False)
    if isinstance(frame, BScan):
        return BScan(out, frame.index)
    return out


def shift_rows(frame, shift: int):
    """Exact circular row shift by an integer (same as a constant integer warp)."""
    px = _pixels(frame)
    out = np.roll(px, int(shift), axis=0)
    if isinstance(frame, BScan):
        return BScan(out, frame.index)
    return out


def _sample_circular(values: np.ndarray, positions: np.ndarray) -> np.ndarray:
    h = values.shape[0]
    lo = np.floor(positions)
    frac = positions - lo
    lo = np.mod(lo.astype(np.int64), h)
    out = values[lo].copy()
    nz = frac != 0
    if np.any(nz):
        hi = (lo[nz] + 1) % h
        out[nz] = values[lo[nz]] + frac[nz] * (values[hi] - values[lo[nz]])
    return out


def compose_warps(a, b) -> np.ndarray:
    """Warp equivalent to applying ``a`` then ``b``.

    ``apply_warp(apply_warp(F, a), b) == apply_warp(F, compose_warps(a, b))``,
    exactly for integer warps under nearest-neighbour sampling. Fractional
    positions of ``a`` are linearly interpolated.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractViolation(f"cannot compose warps of shapes {a.shape} and {b.shape}")
    h = a.shape[0]
    validate_warp(a, h)
    validate_warp(b, h)
    pos = np.arange(h, dtype=np.float64) - b
    return wrap_warp(b + _sample_circular(a, pos), h)


def invert_warp(warp) -> np.ndarray:
    """Warp ``v`` that undoes ``warp``: ``apply_warp(apply_warp(F, warp), v) ~= F``.

    Exact for constant integer warps. The source map ``i -> i - warp[i]`` is
    assumed monotone (|slope of warp| < 1); small violations are flattened.
    """
    h = len(warp)
    u = wrap_warp(validate_warp(warp, h), h)
    idx = np.arange(h, dtype=np.float64)
    # unwrap so that consecutive source positions do not jump across the seam
    src = idx - u
    steps = np.diff(src)
    steps = np.mod(steps + h / 2.0, h) - h / 2.0
    src = np.concatenate([[src[0]], src[0] + np.cumsum(steps)])
    src = np.maximum.accumulate(src)
    span = src[-1] - src[0]
    if span >= h:
        src = src[0] + (src - src[0]) * ((h - 1) / span)
    src_ext = np.concatenate([src - h, src, src + h])
    idx_ext = np.concatenate([idx - h, idx, idx + h])
    origin = np.interp(idx, src_ext, idx_ext)
    return wrap_warp(idx - origin, h)


def psnr(a, b, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def ensure_frames(frames: Sequence) -> list[np.ndarray]:
    return [_pixels(f) for f in frames]
