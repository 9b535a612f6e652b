"""Graph-search baseline: continuous maximum-correlation path through a map.

Rows are visited top to bottom; the column may move by at most ``max_step``
between consecutive rows and pays ``step_penalty`` per unit of movement. The
path is open (row H-1 is not tied back to row 0).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correlation import CorrelationConfig, correlation_map
from .errors import ContractViolation
from .frames import _pixels, invert_warp


@dataclass(frozen=True)
class GsConfig:
    max_step: int = 2
    step_penalty: float = 0.05

    def validate(self) -> None:
        if self.max_step < 1:
            raise ContractViolation("max_step must be >= 1")
        if self.step_penalty < 0:
            raise ContractViolation("step_penalty must be >= 0")


def _pick(cands: np.ndarray, center: int) -> int:
    # ties: smallest |shift|, then lowest column
    return int(min(cands, key=lambda c: (abs(int(c) - center), int(c))))


def gs_path(cmap: np.ndarray, cfg: GsConfig = GsConfig()) -> np.ndarray:
    """Signed shifts (column - w/2) of the best continuous path, one per row."""
    cfg.validate()
    m = np.asarray(cmap, dtype=np.float64)
    if m.ndim != 2 or not np.all(np.isfinite(m)):
        raise ContractViolation("correlation map must be a finite 2-D array")
    H, w = m.shape
    center = w // 2
    lam = float(cfg.step_penalty)
    reach = min(cfg.max_step, w - 1)
    steps = range(-reach, reach + 1)
    V = np.empty((H, w))
    V[0] = m[0]
    for i in range(1, H):
        best = np.full(w, -np.inf)
        prev = V[i - 1]
        for d in steps:
            # column c reached from c - d
            if d >= 0:
                cand = np.full(w, -np.inf)
                cand[d:] = prev[:w - d] - lam * abs(d)
            else:
                cand = np.full(w, -np.inf)
                cand[:w + d] = prev[-d:] - lam * abs(d)
            np.maximum(best, cand, out=best)
        V[i] = best + m[i]

    # scores that differ only by summation-order rounding count as ties
    tol = 1e-9 * (1.0 + float(np.abs(V).max()))
    path = np.empty(H, dtype=np.int64)
    last = V[H - 1]
    c = _pick(np.flatnonzero(last >= last.max() - tol), center)
    path[H - 1] = c
    for i in range(H - 1, 0, -1):
        lo, hi = max(0, c - cfg.max_step), min(w - 1, c + cfg.max_step)
        ps = np.arange(lo, hi + 1)
        vals = (V[i - 1][ps] - lam * np.abs(c - ps)) + m[i][c]
        c = _pick(ps[vals >= V[i][c] - tol], center)
        path[i - 1] = c
    return path - center


def path_to_warp(shifts) -> np.ndarray:
    """Turn per-new-row shifts (new row i matches reference row i + s_i) into a pull
    warp indexed by output row, suitable for ``apply_warp`` on the new frame."""
    return invert_warp(-np.asarray(shifts, dtype=np.float64))


class GsEstimator:
    """Callable estimator: correlation map -> warp vector."""

    def __init__(self, cfg: GsConfig = GsConfig()):
        cfg.validate()
        self.cfg = cfg

    def __call__(self, cmap: np.ndarray) -> np.ndarray:
        return path_to_warp(gs_path(cmap, self.cfg))


def measure_nurd_range(frames, corr_cfg: CorrelationConfig = CorrelationConfig(),
                       gs_cfg: GsConfig = GsConfig()) -> tuple[int, int]:
    """Min and max inter-frame A-line displacement seen by graph search.

    Displacement is reported as motion of frame k+1 relative to frame k, so a
    stream where each frame is the previous one rolled by +3 rows gives (3, 3).
    """
    frames = [_pixels(f) for f in frames]
    if len(frames) < 2:
        raise ContractViolation("need at least two frames to measure NURD")
    lo, hi = 0, 0
    first = True
    for prev, new in zip(frames[:-1], frames[1:]):
        motion = -gs_path(correlation_map(new, prev, corr_cfg), gs_cfg)
        if first:
            lo, hi = int(motion.min()), int(motion.max())
            first = False
        else:
            lo, hi = min(lo, int(motion.min())), max(hi, int(motion.max()))
    return lo, hi
