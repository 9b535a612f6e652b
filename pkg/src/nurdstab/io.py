"""On-disk formats: PGM/PPM images, frame-stream directories, warps.csv."""
from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ContractViolation
from .frames import BScan, FrameStream, ScanMode

FRAME_NAME = "frame_{:05d}.pgm"


def _quantize(img: np.ndarray, bit_depth: int) -> np.ndarray:
    maxval = (1 << bit_depth) - 1
    q = np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * maxval)
    return q.astype(">u2" if bit_depth == 16 else np.uint8)


def write_pgm(path, img: np.ndarray, bit_depth: int = 16) -> None:
    """Write a [0, 1] float image as binary PGM (P5), 8- or 16-bit big-endian."""
    if bit_depth not in (8, 16):
        raise ContractViolation(f"unsupported bit depth {bit_depth}")
    img = np.asarray(img)
    if img.ndim != 2:
        raise ContractViolation("PGM images are 2-D")
    data = _quantize(img, bit_depth)
    h, w = img.shape
    header = f"P5\n{w} {h}\n{(1 << bit_depth) - 1}\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    """Write an (H, W, 3) [0, 1] float image as 8-bit binary PPM (P6)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractViolation("PPM images are (H, W, 3)")
    h, w, _ = img.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + _quantize(img, 8).tobytes())


_TOKEN = re.compile(rb"(#[^\n]*\n)|(\S+)")


def _parse_header(raw: bytes, magic: bytes, n_fields: int):
    fields = []
    pos = 0
    while len(fields) < n_fields + 1:
        m = _TOKEN.search(raw, pos)
        if m is None:
            raise ContractViolation("truncated PNM header")
        pos = m.end()
        if m.group(2) is not None:
            fields.append(m.group(2))
    if fields[0] != magic:
        raise ContractViolation(f"expected {magic!r} image, found {fields[0]!r}")
    # exactly one whitespace byte separates the header from the raster
    return [int(f) for f in fields[1:]], pos + 1


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return (raw integer image, maxval)."""
    raw = Path(path).read_bytes()
    (w, h, maxval), offset = _parse_header(raw, b"P5", 3)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=offset)
    return data.reshape(h, w), maxval


def read_pgm_normalized(path) -> np.ndarray:
    data, maxval = read_pgm(path)
    return data.astype(np.float64) / maxval


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (w, h, maxval), offset = _parse_header(raw, b"P6", 3)
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=offset)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def write_warps_csv(path, warps) -> None:
    lines = [",".join(repr(float(x)) for x in np.asarray(w, dtype=np.float64)) for w in warps]
    Path(path).write_text("\n".join(lines) + "\n")


def read_warps_csv(path) -> list[np.ndarray]:
    text = Path(path).read_text().strip()
    if not text:
        return []
    return [np.array([float(x) for x in line.split(",")]) for line in text.splitlines()]


def write_stream(directory, stream: FrameStream, bit_depth: int = 16, extra_manifest=None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    h, w = stream.shape
    for k, f in enumerate(stream.frames):
        write_pgm(d / FRAME_NAME.format(k), f.pixels, bit_depth)
    manifest = {
        "height": h,
        "width": w,
        "scan_mode": stream.scan_mode.value,
        "frame_count": len(stream),
        "bit_depth": bit_depth,
        "ground_truth": stream.ground_truth_warps is not None,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if stream.ground_truth_warps is not None:
        write_warps_csv(d / "warps.csv", stream.ground_truth_warps)
    return d


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise ContractViolation(f"{directory} is not a frame stream (no manifest.json)")
    return json.loads(path.read_text())


def iter_stream_frames(directory, dtype=np.float32) -> Iterator[np.ndarray]:
    """Yield frames one at a time, in order, reading each file only when requested."""
    d = Path(directory)
    manifest = read_manifest(d)
    for k in range(manifest["frame_count"]):
        img = read_pgm_normalized(d / FRAME_NAME.format(k))
        if img.shape != (manifest["height"], manifest["width"]):
            raise ContractViolation(f"frame {k} shape {img.shape} disagrees with manifest")
        yield img.astype(dtype)


def read_stream(directory, dtype=np.float32) -> FrameStream:
    d = Path(directory)
    manifest = read_manifest(d)
    frames = tuple(BScan(img, k) for k, img in enumerate(iter_stream_frames(d, dtype)))
    warps = None
    if manifest.get("ground_truth") and (d / "warps.csv").is_file():
        warps = read_warps_csv(d / "warps.csv")
    return FrameStream(frames, ScanMode(manifest["scan_mode"]), warps, meta=manifest)
