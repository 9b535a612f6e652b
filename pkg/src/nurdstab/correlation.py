"""Pearson correlation maps between a new frame and the last stabilized frame."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .frames import _pixels


@dataclass(frozen=True)
class CorrelationConfig:
    patch_height: int = 5
    window: int = 64
    degenerate_value: float = 0.0
    # optional [r0, r1) depth crop; None correlates the full A-line
    radial_range: tuple[int, int] | None = None

    def validate(self, height: int | None = None) -> None:
        h, w = self.patch_height, self.window
        if h < 1 or h % 2 == 0:
            raise ContractViolation(f"patch_height must be odd and positive, got {h}")
        if w < 2 or w % 2:
            raise ContractViolation(f"window must be positive and even, got {w}")
        if not -1.0 <= self.degenerate_value <= 1.0:
            raise ContractViolation("degenerate_value must lie in [-1, 1]")
        if height is not None:
            if not 3 <= h <= height // 4:
                raise ContractViolation(f"patch_height {h} outside [3, H/4] for H={height}")
            if w > height:
                raise ContractViolation(f"window {w} exceeds frame height {height}")
        if self.radial_range is not None:
            r0, r1 = self.radial_range
            if not 0 <= r0 < r1:
                raise ContractViolation(f"bad radial range {self.radial_range}")


def _degenerate_tol(n: int, scale: float) -> float:
    # patches whose per-pixel spread is below ~1e-7 of the frame's magnitude count as flat
    return n * (1e-7 * scale) ** 2


def pearson(patch_a, patch_b, degenerate_value: float = 0.0) -> float:
    """Pearson coefficient of two equally shaped patches, clamped to [-1, 1].

    Evaluated on mean-centred data, which is algebraically the sum form
    ``(sum f f' - n mean(f) mean(f')) / (|f - mean f| |f' - mean f'|)`` but
    does not cancel catastrophically for large offsets.
    """
    a = np.asarray(patch_a, dtype=np.float64)
    b = np.asarray(patch_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"patch shapes differ: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ContractViolation("patches must be finite")
    n = a.size
    ac = a - a.mean()
    bc = b - b.mean()
    va = float(np.dot(ac.ravel(), ac.ravel()))
    vb = float(np.dot(bc.ravel(), bc.ravel()))
    if va <= _degenerate_tol(n, float(np.abs(a).max(initial=0.0))) or \
            vb <= _degenerate_tol(n, float(np.abs(b).max(initial=0.0))):
        return float(degenerate_value)
    r = float(np.dot(ac.ravel(), bc.ravel())) / np.sqrt(va * vb)
    return float(min(1.0, max(-1.0, r)))


def _box_rows(v: np.ndarray, h: int) -> np.ndarray:
    """Circular sum over the h rows centred on each row."""
    half = h // 2
    out = v.copy()
    for t in range(1, half + 1):
        out += np.roll(v, -t, axis=0)
        out += np.roll(v, t, axis=0)
    return out


def correlation_map(new_frame, ref_frame, cfg: CorrelationConfig = CorrelationConfig()) -> np.ndarray:
    """H x w map: entry (i, c) correlates the patch at row i of ``new_frame`` with
    the patch at row ``i - w/2 + c`` of ``ref_frame`` (rows wrap around).

    Column ``w/2`` is zero shift. A peak at column ``w/2 + s`` means the new
    frame must be warped by ``+s`` to line up with the reference.
    """
    x = np.asarray(_pixels(new_frame), dtype=np.float64)
    y = np.asarray(_pixels(ref_frame), dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ContractViolation(f"frame shapes differ: {x.shape} vs {y.shape}")
    H = x.shape[0]
    cfg.validate(H)
    if cfg.radial_range is not None:
        r0, r1 = cfg.radial_range
        x = x[:, r0:r1]
        y = y[:, r0:r1]
    h, w = cfg.patch_height, cfg.window
    n = h * x.shape[1]
    tol_x = _degenerate_tol(n, float(np.abs(x).max(initial=0.0)))
    tol_y = _degenerate_tol(n, float(np.abs(y).max(initial=0.0)))
    # Pearson is offset invariant per patch, so removing the frame mean only improves conditioning
    x = x - x.mean()
    y = y - y.mean()

    sx = _box_rows(x.sum(axis=1), h)
    sxx = _box_rows(np.einsum("ij,ij->i", x, x), h)
    sy = _box_rows(y.sum(axis=1), h)
    syy = _box_rows(np.einsum("ij,ij->i", y, y), h)

    half = w // 2
    rows = np.arange(H)
    ext = np.mod(np.arange(H + w) - half, H)
    y_ext = y[ext]
    dots = np.empty((H, w))
    for c in range(w):
        dots[:, c] = np.einsum("ij,ij->i", x, y_ext[c:c + H])
    sxy = _box_rows(dots, h)

    ref_rows = np.mod(rows[:, None] - half + np.arange(w)[None, :], H)
    sy_g = sy[ref_rows]
    syy_g = syy[ref_rows]
    cov = sxy - sx[:, None] * sy_g / n
    vx = np.broadcast_to((sxx - sx * sx / n)[:, None], cov.shape)
    vy = syy_g - sy_g * sy_g / n
    bad = (vx <= tol_x) | (vy <= tol_y)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = cov / np.sqrt(vx * vy)
    r = np.clip(r, -1.0, 1.0)
    r[bad] = cfg.degenerate_value
    return r


def map_to_image(cmap: np.ndarray) -> np.ndarray:
    """Linear [-1, 1] -> [0, 1] mapping used for debug dumps."""
    return (np.clip(cmap, -1.0, 1.0) + 1.0) / 2.0
