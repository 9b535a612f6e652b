"""Binary model file.

Layout (little-endian):
    b"NNET", u32 version
    u32 window, f32 leaky slope, f32 bn momentum, f32 bn eps
    u32 layer count, then per layer:
        u8 branch (0 left, 1 right, 2 combiner), u8 flags (bit0 batch-norm, bit1 activation)
        u16 kh, kw, cin, cout, stride_v, stride_h, pad_t, pad_b, pad_l, pad_r, dil_v, dil_h
    f32 parameters in descriptor order (conv weight kh*kw*cin*cout, conv bias, bn gamma, bn beta)
    f32 batch-norm running mean and variance per batch-norm layer, in layer order
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .layers import ConvSpec
from .model import COMBINER, LEFT, RIGHT, ArchConfig, NurdNet

MAGIC = b"NNET"
VERSION = 1
_LAYER = struct.Struct("<BB12H")


def to_bytes(net: NurdNet) -> bytes:
    a = net.arch
    out = [MAGIC, struct.pack("<I", VERSION),
           struct.pack("<Ifff", a.window, a.leaky_slope, a.bn_momentum, a.bn_eps)]
    blocks = net.blocks()
    out.append(struct.pack("<I", len(blocks)))
    for branch, b in blocks:
        s = b.conv.spec
        flags = int(s.batchnorm) | (int(s.activation) << 1)
        out.append(_LAYER.pack(branch, flags, s.kh, s.kw, s.cin, s.cout, *s.stride, *s.pad, *s.dilation))
    for _, p, _ in net.parameters():
        out.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    for bn in net.batchnorms():
        out.append(np.asarray(bn.running_mean, dtype="<f4").tobytes())
        out.append(np.asarray(bn.running_var, dtype="<f4").tobytes())
    return b"".join(out)


def from_bytes(data: bytes, dtype=np.float32) -> NurdNet:
    if data[:4] != MAGIC:
        raise ConfigError("not a model file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ConfigError(f"unsupported model format version {version}")
    window, slope, momentum, eps = struct.unpack_from("<Ifff", data, 8)
    (n_layers,) = struct.unpack_from("<I", data, 24)
    pos = 28
    groups = {LEFT: [], RIGHT: [], COMBINER: []}
    for _ in range(n_layers):
        branch, flags, kh, kw, cin, cout, sv, sh, pt, pb, pl, pr, dv, dh = _LAYER.unpack_from(data, pos)
        pos += _LAYER.size
        if branch not in groups:
            raise ConfigError(f"bad branch id {branch} in model file")
        groups[branch].append(ConvSpec(kh, kw, cin, cout, (sv, sh), (pt, pb, pl, pr), (dv, dh),
                                       batchnorm=bool(flags & 1), activation=bool(flags & 2)))
    if len(groups[COMBINER]) != 1:
        raise ConfigError("model file must contain exactly one combiner layer")
    arch = ArchConfig(window=window, leaky_slope=float(slope), bn_momentum=float(momentum), bn_eps=float(eps),
                      left=groups[LEFT], right=groups[RIGHT], combiner=groups[COMBINER][0])
    net = NurdNet(arch, dtype=dtype)
    arrays = [p for _, p, _ in net.parameters()]
    for bn in net.batchnorms():
        arrays += [bn.running_mean, bn.running_var]
    need = sum(a.size for a in arrays) * 4
    if len(data) - pos != need:
        raise ConfigError(f"model file payload is {len(data) - pos} bytes, expected {need}")
    for a in arrays:
        a[...] = np.frombuffer(data, dtype="<f4", count=a.size, offset=pos).reshape(a.shape)
        pos += a.size * 4
    return net


def save_model(net: NurdNet, path) -> None:
    Path(path).write_bytes(to_bytes(net))


def load_model(path, dtype=np.float32) -> NurdNet:
    return from_bytes(Path(path).read_bytes(), dtype=dtype)
