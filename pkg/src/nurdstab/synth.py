"""Synthetic NURD injection and dataset construction."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter, gaussian_filter1d

from .correlation import CorrelationConfig, correlation_map
from .errors import ConfigError
from .frames import FrameStream, apply_warp, compose_warps, invert_warp, wrap_warp

AUGMENTATIONS = ("geometric", "noise", "brightness_contrast", "speckle", "shadow")


@dataclass(frozen=True)
class SynthConfig:
    amplitude: float = 4.0  # A: NURD entries lie in [-A, A] (A-line units)
    smoothness: float = 16.0  # rho: std of the circular Gaussian smoothing kernel (rows)
    drift_per_frame: float = 0.0
    augment: tuple[str, ...] = ()
    seed: int = 0

    def validate(self) -> None:
        if not np.isfinite(self.amplitude) or self.amplitude < 0:
            raise ConfigError("amplitude must be a finite nonnegative number")
        if self.smoothness < 1:
            raise ConfigError("smoothness must be >= 1")
        if not np.isfinite(self.drift_per_frame):
            raise ConfigError("drift_per_frame must be finite")
        unknown = set(self.augment) - set(AUGMENTATIONS)
        if unknown:
            raise ConfigError(f"unknown augmentations: {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = list(self.augment)
        return d


def threads() -> int:
    try:
        return max(1, int(os.environ.get("NURDSTAB_THREADS", "1")))
    except ValueError:
        return 1


def expand_range(observed: tuple[float, float]) -> float:
    """Symmetric amplitude bound: the larger observed side widened by a third on each side."""
    lo, hi = observed
    return max(abs(lo), abs(hi)) * 4.0 / 3.0


def generate_warp(height: int, cfg: SynthConfig, rng: np.random.Generator, drift: float | None = None) -> np.ndarray:
    """Circularly smoothed Gaussian noise rescaled to a random peak in [0, A], plus a constant drift."""
    cfg.validate()
    drift = cfg.drift_per_frame if drift is None else drift
    noise = rng.standard_normal(height)
    peak_target = rng.uniform(0.0, cfg.amplitude)
    if cfg.amplitude == 0:
        return np.full(height, float(drift))
    v = gaussian_filter1d(noise, cfg.smoothness, mode="wrap")
    v *= peak_target / max(np.abs(v).max(), 1e-12)
    return v + drift


@dataclass
class _StreamAug:
    radial_shift: int = 0
    noise_sigma: float = 0.0
    gain: float = 1.0
    offset: float = 0.0
    speckle_mix: float = 0.0
    shadow: tuple[float, float, float] | None = None  # (center, width, factor)

    @classmethod
    def draw(cls, augment, height, rng) -> "_StreamAug":
        a = cls()
        if "geometric" in augment:
            a.radial_shift = int(rng.integers(-3, 4))
        if "noise" in augment:
            a.noise_sigma = float(rng.uniform(0.0, 0.05))
        if "brightness_contrast" in augment:
            a.gain = float(rng.uniform(0.8, 1.2))
            a.offset = float(rng.uniform(-0.1, 0.1))
        if "speckle" in augment:
            a.speckle_mix = float(rng.uniform(0.1, 0.4))
        if "shadow" in augment:
            a.shadow = (float(rng.uniform(0, height)), float(rng.uniform(8, 40)), float(rng.uniform(0.2, 0.6)))
        return a

    def apply(self, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = img.astype(np.float64)
        H, W = out.shape
        if self.radial_shift:
            s = self.radial_shift
            if s > 0:
                out = np.concatenate([np.repeat(out[:, :1], s, axis=1), out[:, :-s]], axis=1)
            else:
                out = np.concatenate([out[:, -s:], np.repeat(out[:, -1:], -s, axis=1)], axis=1)
        if self.speckle_mix:
            grain = rng.exponential(1.0, (H, W))
            grain = gaussian_filter(grain, (1.0, 0.7), mode=("wrap", "reflect"))
            grain /= grain.mean()
            out = out * ((1 - self.speckle_mix) + self.speckle_mix * grain)
        if self.shadow is not None:
            c, w, f = self.shadow
            d = np.abs(np.arange(H) - c) % H
            d = np.minimum(d, H - d)
            att = np.where(d < w / 2, f, 1.0)
            out = out * att[:, None]
        if self.gain != 1.0 or self.offset:
            out = out * self.gain + self.offset
        if self.noise_sigma:
            out = out + rng.normal(0.0, self.noise_sigma, out.shape)
        return np.clip(out, 0.0, 1.0)


def distort_stream(source: FrameStream, cfg: SynthConfig = SynthConfig(),
                   rng: np.random.Generator | None = None) -> FrameStream:
    """Warp every frame by its own smooth NURD plus the accumulated drift.

    Frame k is ``apply_warp(source[k], W_k)`` where ``W_k`` is a fresh smooth
    warp plus ``k * drift_per_frame`` (wrapped to the angular range).
    """
    cfg.validate()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    H, _ = source.shape
    aug = _StreamAug.draw(cfg.augment, H, rng)
    frames, warps = [], []
    for k, f in enumerate(source.frames):
        w = wrap_warp(generate_warp(H, cfg, rng, drift=0.0) + k * cfg.drift_per_frame, H)
        img = apply_warp(f.pixels, w)
        if cfg.augment:
            img = aug.apply(img, rng)
        frames.append(img.astype(np.float32))
        warps.append(w)
    meta = dict(source.meta)
    meta["synth"] = cfg.to_dict()
    return FrameStream.from_array(np.stack(frames), source.scan_mode, ground_truth_warps=warps, meta=meta)


def relative_warp(prev_warp, new_warp) -> np.ndarray:
    """Warp that maps distorted frame k onto distorted frame k-1.

    Undo ``new_warp`` and re-apply ``prev_warp``; this is exactly what the
    correlation map between the two frames encodes.
    """
    H = len(new_warp)
    return wrap_warp(compose_warps(invert_warp(new_warp), prev_warp), H)


def stream_pairs(stream: FrameStream, corr_cfg: CorrelationConfig = CorrelationConfig()):
    """(maps, targets) for every consecutive pair of a distorted stream."""
    if stream.ground_truth_warps is None:
        raise ConfigError("stream has no ground-truth warps")
    vol = stream.volume(np.float64)
    gt = stream.ground_truth_warps
    maps, targets = [], []
    for k in range(1, len(vol)):
        maps.append(correlation_map(vol[k], vol[k - 1], corr_cfg).astype(np.float32))
        targets.append(relative_warp(gt[k - 1], gt[k]))
    return np.stack(maps), np.stack(targets)


@dataclass
class Split:
    maps: np.ndarray
    targets: np.ndarray
    source_ids: np.ndarray  # source stream index of each pair
    pair_index: np.ndarray  # index k of the newer frame in its stream

    def __len__(self) -> int:
        return len(self.maps)


@dataclass
class Dataset:
    train: Split
    validation: Split
    test: Split
    split_sources: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)


def split_sources(n_sources: int, seed: int) -> dict[str, list[int]]:
    if n_sources < 3:
        raise ConfigError("at least three source streams are needed for a leakage-free 1:1:1 split")
    order = np.random.default_rng(seed).permutation(n_sources)
    parts = np.array_split(order, 3)
    return {name: sorted(int(i) for i in p) for name, p in zip(("train", "validation", "test"), parts)}


def distort_sources(sources: Sequence[FrameStream], cfg: SynthConfig = SynthConfig()) -> list[FrameStream]:
    """Distort every source with its own seed derived from ``cfg.seed``."""
    cfg.validate()
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(sources))

    def one(i):
        return distort_stream(sources[i], cfg, np.random.default_rng(seeds[i]))

    n_workers = min(threads(), len(sources))
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as ex:
            return list(ex.map(one, range(len(sources))))
    return [one(i) for i in range(len(sources))]


def dataset_from_streams(distorted: Sequence[FrameStream], assignment: dict[str, list[int]],
                         corr_cfg: CorrelationConfig = CorrelationConfig(), synth: dict | None = None) -> Dataset:
    for name in ("train", "validation", "test"):
        if not assignment.get(name):
            raise ConfigError(f"split {name!r} is empty or missing")
    cache = {}

    def pairs(i):
        if i not in cache:
            cache[i] = stream_pairs(distorted[i], corr_cfg)
        return cache[i]

    def gather(ids):
        res = [pairs(i) for i in ids]
        return Split(np.concatenate([m for m, _ in res]), np.concatenate([t for _, t in res]),
                     np.concatenate([np.full(len(m), i) for i, (m, _) in zip(ids, res)]),
                     np.concatenate([np.arange(1, len(m) + 1) for m, _ in res]))

    return Dataset(*(gather(assignment[n]) for n in ("train", "validation", "test")),
                   split_sources=assignment, synth=synth or {})


def make_dataset(sources: Sequence[FrameStream], corr_cfg: CorrelationConfig = CorrelationConfig(),
                 cfg: SynthConfig = SynthConfig()) -> Dataset:
    """Distort each source and collect (map, relative warp) pairs, split 1:1:1 by source."""
    cfg.validate()
    if len(sources) == 0:
        raise ConfigError("no source streams given")
    assignment = split_sources(len(sources), cfg.seed)
    return dataset_from_streams(distort_sources(sources, cfg), assignment, corr_cfg, cfg.to_dict())


def write_dataset(directory, distorted: Sequence[FrameStream], cfg: SynthConfig, bit_depth: int = 16) -> Path:
    """dataset.json (split manifest, synthesis settings) plus one stream directory per source."""
    from .io import write_stream

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    assignment = split_sources(len(distorted), cfg.seed)
    names = []
    for i, s in enumerate(distorted):
        name = f"stream_{i:03d}"
        write_stream(directory / name, s, bit_depth=bit_depth)
        names.append(name)
    meta = {"streams": names, "split_sources": assignment, "ratio": "1:1:1", "synth": cfg.to_dict()}
    (directory / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_dataset(directory, corr_cfg: CorrelationConfig = CorrelationConfig()) -> Dataset:
    from .io import read_stream

    directory = Path(directory)
    meta_file = directory / "dataset.json"
    if not meta_file.exists():
        raise ConfigError(f"{directory} has no dataset.json split manifest")
    meta = json.loads(meta_file.read_text())
    assignment = meta.get("split_sources") or {}
    streams = [read_stream(directory / n) for n in meta.get("streams", [])]
    ids = [i for v in assignment.values() for i in v]
    if any(i >= len(streams) for i in ids):
        raise ConfigError("split manifest references missing streams")
    return dataset_from_streams(streams, assignment, corr_cfg, meta.get("synth"))
