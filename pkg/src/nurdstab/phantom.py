"""Procedural polar B-scan phantoms.

Each frame has a probe interior, a sheath band with faint angular texture,
layered tissue with multiplicative speckle behind a wavy lumen surface, an
angularly localized bright structure (gives the en-face projection a ridge
to track) and optional featureless sectors where only background noise is
recorded. Frames evolve slowly along the stream, as in a pullback.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, gaussian_filter1d

from .frames import FrameStream, ScanMode, apply_warp


@dataclass(frozen=True)
class PhantomConfig:
    height: int = 512
    width: int = 256
    sheath: tuple[int, int] = (8, 40)
    featureless_sectors: tuple[int, int] = (1, 2)  # inclusive count range
    sector_width: tuple[int, int] = (30, 70)  # A-lines
    speckle_rows: float = 2.0  # angular correlation of speckle grain, in A-lines
    speckle_cols: float = 1.0
    speckle_contrast: float = 0.6
    speckle_memory: float = 0.995  # AR(1) coefficient between consecutive frames
    shape_rate: float = 0.004  # phase drift of the lumen shape per frame (radians)
    noise: float = 0.01
    ridge_gain: float = 0.9
    ridge_width: float = 5.0
    sheath_marks: int = 3
    scan_mode: ScanMode = ScanMode.ROBOTIC_OUTER_PULLBACK


def _smooth_noise(rng, n, sigma):
    v = gaussian_filter1d(rng.standard_normal(n), sigma, mode="wrap")
    return v / (np.abs(v).max() + 1e-12)


def _circ_dist(a, b, n):
    d = np.abs(a - b) % n
    return np.minimum(d, n - d)


class PhantomGenerator:
    """Stateful source of consecutive phantom frames (deterministic given the rng)."""

    def __init__(self, cfg: PhantomConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        H, W = cfg.height, cfg.width
        self.theta = np.arange(H, dtype=np.float64)
        self.depth = np.arange(W, dtype=np.float64)
        r0, r1 = cfg.sheath
        span = r1 - r0
        self.sheath_rows = (r0 + 0.2 * span, r0 + 0.75 * span)
        # sheath texture: faint modulation plus a few localized marks
        self.sheath_fields = [_smooth_noise(rng, H, 6.0) for _ in range(2)]
        marks = np.zeros((2, H))
        for j in range(2):
            for c in rng.uniform(0, H, cfg.sheath_marks):
                marks[j] += np.exp(-0.5 * (_circ_dist(self.theta, c, H) / 2.5) ** 2)
        self.sheath_marks = marks
        # lumen surface and layer thickness as low-order Fourier series with slowly moving phases
        self.modes = np.arange(1, 5)
        self.surf_amp = rng.uniform(3, 14, len(self.modes)) / self.modes
        self.surf_phase = rng.uniform(0, 2 * np.pi, len(self.modes))
        self.surf_rate = rng.uniform(-1, 1, len(self.modes)) * cfg.shape_rate
        self.surf_base = rng.uniform(r1 + 25, r1 + 55)
        self.layer_amp = rng.uniform(2, 6, (2, len(self.modes))) / self.modes
        self.layer_phase = rng.uniform(0, 2 * np.pi, (2, len(self.modes)))
        self.layer_base = (rng.uniform(10, 18), rng.uniform(18, 30))
        self.layer_level = (rng.uniform(0.6, 0.85), rng.uniform(0.3, 0.5), rng.uniform(0.45, 0.65))
        self.atten = rng.uniform(50, 90)
        # sectors with no tissue in view
        lo, hi = cfg.featureless_sectors
        n_sec = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
        self.sectors = [(rng.uniform(0, H), rng.uniform(*cfg.sector_width)) for _ in range(n_sec)]
        self.ridge_center = self._ridge_position(rng)
        self.z = [self._grain() for _ in range(2)]
        self.k = 0

    def _ridge_position(self, rng) -> float:
        H = self.cfg.height
        for _ in range(100):
            c = rng.uniform(0, H)
            if all(_circ_dist(c, s, H) > w / 2 + 4 * self.cfg.ridge_width for s, w in self.sectors):
                return c
        return rng.uniform(0, H)

    def _grain(self) -> np.ndarray:
        c = self.cfg
        g = self.rng.standard_normal((c.height, c.width))
        g = gaussian_filter(g, (c.speckle_rows, c.speckle_cols), mode=("wrap", "reflect"))
        return g / g.std()

    def _series(self, amp, phase, rate):
        k = self.k
        ang = 2 * np.pi * self.theta[:, None] / self.cfg.height * self.modes[None, :]
        return (amp[None, :] * np.sin(ang + phase[None, :] + rate[None, :] * k)).sum(axis=1)

    def tissue_mask(self) -> np.ndarray:
        H = self.cfg.height
        m = np.ones(H)
        for c, w in self.sectors:
            d = _circ_dist(self.theta, c, H)
            m *= np.clip((d - w / 2) / 4.0, 0.0, 1.0)
        return m

    def next_frame(self) -> np.ndarray:
        c = self.cfg
        rng = self.rng
        H, W = c.height, c.width
        r = self.depth[None, :]

        # speckle grain evolves as an AR(1) process
        a = c.speckle_memory
        self.z = [a * z + np.sqrt(1 - a * a) * self._grain() for z in self.z]
        speckle = 0.5 * (self.z[0] ** 2 + self.z[1] ** 2)
        speckle = (1 - c.speckle_contrast) + c.speckle_contrast * speckle

        surf = self.surf_base + self._series(self.surf_amp, self.surf_phase, self.surf_rate)
        t1 = self.layer_base[0] + self._series(self.layer_amp[0], self.layer_phase[0], self.surf_rate)
        t2 = self.layer_base[1] + self._series(self.layer_amp[1], self.layer_phase[1], -self.surf_rate)
        depth_in = r - surf[:, None]
        l1, l2, l3 = self.layer_level
        level = np.where(depth_in < t1[:, None], l1, np.where(depth_in < (t1 + t2)[:, None], l2, l3))
        edge = 1.0 / (1.0 + np.exp(-depth_in / 0.8))
        tissue = edge * level * np.exp(-np.clip(depth_in, 0, None) / self.atten)
        ridge = 1.0 + c.ridge_gain * np.exp(
            -0.5 * (_circ_dist(self.theta, self.ridge_center, H) / c.ridge_width) ** 2)
        tissue = tissue * (ridge * self.tissue_mask())[:, None] * speckle

        phase = 0.0
        if ScanMode(c.scan_mode) is ScanMode.INTERNAL_PULLBACK:
            phase = 0.01 * self.k
        sheath = np.zeros((H, W))
        for j, (row, width, level_j) in enumerate(zip(self.sheath_rows, (1.2, 1.8), (0.55, 0.35))):
            mod = 1.0 + 0.15 * (np.cos(phase) * self.sheath_fields[0] + np.sin(phase) * self.sheath_fields[1])
            mod = mod + 0.6 * np.roll(self.sheath_marks[j], int(round(phase * 40)))
            sheath += level_j * mod[:, None] * np.exp(-0.5 * ((r - row) / width) ** 2)
        sheath *= 0.85 + 0.15 * speckle

        background = 0.02 + np.abs(rng.normal(0.0, c.noise, (H, W)))
        img = background + sheath + tissue
        self.k += 1
        return np.clip(img, 0.0, 1.0)


def phantom_stream(n_frames: int, cfg: PhantomConfig = PhantomConfig(), seed: int | None = None,
                   rng: np.random.Generator | None = None) -> FrameStream:
    rng = rng if rng is not None else np.random.default_rng(seed)
    gen = PhantomGenerator(cfg, rng)
    vol = np.stack([gen.next_frame() for _ in range(n_frames)]).astype(np.float32)
    meta = {"ridge_center": gen.ridge_center, "sectors": [list(s) for s in gen.sectors]}
    return FrameStream.from_array(vol, cfg.scan_mode, meta=meta)


def flat_target_stack(n_frames: int, rotations, cfg: PhantomConfig = PhantomConfig(), *,
                      distance: float = 70.0, nurd: float = 0.0, noise_frames=(), seed: int = 0) -> FrameStream:
    """Raw reference stack recorded against a flat target.

    The target is a straight surface ``distance`` samples from the probe axis,
    which appears in polar coordinates at depth ``distance / cos(phi)``. Each
    frame is rotated by the matching entry of ``rotations`` (A-line units);
    frames listed in ``noise_frames`` contain noise only.
    """
    rng = np.random.default_rng(seed)
    H, W = cfg.height, cfg.width
    gen = PhantomGenerator(PhantomConfig(**{**cfg.__dict__, "featureless_sectors": (0, 0)}), rng)
    phi = 2 * np.pi * (np.arange(H) - H / 4) / H
    with np.errstate(divide="ignore"):
        depth = np.where(np.cos(phi) > 0.05, distance / np.cos(phi), np.inf)
    r = np.arange(W)[None, :]
    inside = depth[:, None]
    target = np.where(r >= inside, 0.8 * np.exp(-(r - inside) / 25.0), 0.0)
    frames = []
    for k in range(n_frames):
        base = gen.next_frame()
        r0, r1 = cfg.sheath
        img = np.where(r < r1 + 2, base, 0.02) + target * (0.8 + 0.2 * rng.random((H, W)))
        img = img + np.abs(rng.normal(0, cfg.noise, img.shape))
        if nurd:
            w = _smooth_noise(rng, H, 20.0) * nurd
            img = apply_warp(img, w)
        img = apply_warp(img, np.full(H, float(rotations[k])))
        if k in noise_frames:
            img = np.abs(rng.normal(0.05, 0.05, img.shape))
        frames.append(np.clip(img, 0, 1))
    return FrameStream.from_array(np.stack(frames).astype(np.float32), ScanMode.INTERNAL_PULLBACK,
                                  meta={"rotations": [float(x) for x in rotations]})
