"""Two-branch convolutional regressor: correlation map (H x w) -> warp vector (H).

Left branch: vertical stride 1, widths 64 -> 32 -> 16 -> 8 -> 4 -> 1 with
channel depth doubling from 8 to 128, then a 1x1 projection to one channel.
Right branch: vertical stride 2 in each of six layers (H -> H/64), width kept
at w, larger kernels up front; its (H/64) x w output is flattened row by row
into H values. A 3x1 convolution merges the two H-long predictions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractViolation, TrainingError
from .layers import BatchNorm, Conv2D, ConvSpec, LeakyReLU, RowFlatten

LEFT, RIGHT, COMBINER = 0, 1, 2


def _vstride2_pad(kh: int, left: int, right: int) -> tuple[int, int, int, int]:
    top = (kh - 1) // 2
    return (top, kh - 2 - top, left, right)


def default_left_specs() -> list[ConvSpec]:
    specs = []
    cin = 1
    for cout in (8, 16, 32, 64):
        specs.append(ConvSpec(3, 4, cin, cout, stride=(1, 2), pad=(1, 1, 1, 1)))
        cin = cout
    specs.append(ConvSpec(3, 4, 64, 128, stride=(1, 4), pad=(1, 1, 0, 0)))
    specs.append(ConvSpec(1, 1, 128, 1, batchnorm=False, activation=False))
    return specs


def default_right_specs() -> list[ConvSpec]:
    kernels = (7, 5, 5, 3, 3, 3)
    depths = (8, 16, 32, 64, 64, 1)
    specs = []
    cin = 1
    for i, (kh, cout) in enumerate(zip(kernels, depths)):
        last = i == len(kernels) - 1
        specs.append(ConvSpec(kh, 3, cin, cout, stride=(2, 1), pad=_vstride2_pad(kh, 1, 1),
                              batchnorm=not last, activation=not last))
        cin = cout
    return specs


def default_combiner_spec() -> ConvSpec:
    return ConvSpec(3, 1, 2, 1, pad=(1, 1, 0, 0), batchnorm=False, activation=False)


@dataclass
class Block:
    conv: Conv2D
    bn: BatchNorm | None = None
    act: LeakyReLU | None = None

    def layers(self):
        return [l for l in (self.conv, self.bn, self.act) if l is not None]


@dataclass
class ArchConfig:
    window: int = 64
    leaky_slope: float = 0.01
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    left: list[ConvSpec] = field(default_factory=default_left_specs)
    right: list[ConvSpec] = field(default_factory=default_right_specs)
    combiner: ConvSpec = field(default_factory=default_combiner_spec)


class NurdNet:
    def __init__(self, arch: ArchConfig | None = None, dtype=np.float32):
        self.arch = arch or ArchConfig()
        self.dtype = np.dtype(dtype)
        a = self.arch
        self.left = [self._block(s) for s in a.left]
        self.right = [self._block(s) for s in a.right]
        self.combiner = self._block(a.combiner)
        self.flatten = RowFlatten()
        self._check_arch()

    def _block(self, spec: ConvSpec) -> Block:
        a = self.arch
        return Block(Conv2D(spec, self.dtype),
                     BatchNorm(spec.cout, a.bn_momentum, a.bn_eps, self.dtype) if spec.batchnorm else None,
                     LeakyReLU(a.leaky_slope) if spec.activation else None)

    def _check_arch(self) -> None:
        w = self.arch.window
        width = w
        for s in self.arch.left:
            width = s.out_shape(64, width)[1]
        if width != 1 or self.arch.left[-1].cout != 1:
            raise ContractViolation(f"left branch must reduce width {w} to a single channel column")
        width = w
        for s in self.arch.right:
            width = s.out_shape(64, width)[1]
        if width != w or self.arch.right[-1].cout != 1:
            raise ContractViolation("right branch must keep the map width and end in one channel")
        if w != 64:
            raise ContractViolation("flattening (H/64) x w rows to H values requires w == 64")

    # ------------------------------------------------------------------ params
    def blocks(self) -> list[tuple[int, Block]]:
        return [(LEFT, b) for b in self.left] + [(RIGHT, b) for b in self.right] + [(COMBINER, self.combiner)]

    def layer_list(self):
        return [l for _, b in self.blocks() for l in b.layers()]

    def parameters(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """(name, value, grad) triples in descriptor order."""
        out = []
        for li, (_, b) in enumerate(self.blocks()):
            for name, p, g in b.conv.params():
                out.append((f"{li}.conv.{name}", p, g))
            if b.bn is not None:
                for name, p, g in b.bn.params():
                    out.append((f"{li}.bn.{name}", p, g))
        return out

    def batchnorms(self) -> list[BatchNorm]:
        return [b.bn for _, b in self.blocks() if b.bn is not None]

    def zero_grad(self) -> None:
        for _, _, g in self.parameters():
            g[...] = 0

    def init(self, rng: np.random.Generator) -> "NurdNet":
        """He-normal weights (variance 2/fan_in), zero biases, identity batch-norm."""
        for _, b in self.blocks():
            s = b.conv.spec
            fan_in = s.kh * s.kw * s.cin
            b.conv.weight[...] = rng.standard_normal(b.conv.weight.shape) * np.sqrt(2.0 / fan_in)
            b.conv.bias[...] = 0
            if b.bn is not None:
                b.bn.gamma[...] = 1
                b.bn.beta[...] = 0
                b.bn.running_mean[...] = 0
                b.bn.running_var[...] = 1
        return self

    def n_params(self) -> int:
        return sum(p.size for _, p, _ in self.parameters())

    def copy_state(self) -> list[np.ndarray]:
        state = [p.copy() for _, p, _ in self.parameters()]
        for bn in self.batchnorms():
            state += [bn.running_mean.copy(), bn.running_var.copy()]
        return state

    def load_state(self, state) -> None:
        params = self.parameters()
        for (_, p, _), v in zip(params, state):
            p[...] = v
        rest = list(state[len(params):])
        for bn in self.batchnorms():
            bn.running_mean[...] = rest.pop(0)
            bn.running_var[...] = rest.pop(0)

    # ----------------------------------------------------------------- compute
    def check_input(self, maps: np.ndarray) -> np.ndarray:
        maps = np.asarray(maps)
        if maps.ndim == 2:
            maps = maps[None]
        if maps.ndim != 3:
            raise ContractViolation(f"expected (N, H, w) maps, got shape {maps.shape}")
        _, h, w = maps.shape
        if w != self.arch.window:
            raise ContractViolation(f"map width {w} does not match network window {self.arch.window}")
        if h < 64 or h % 64:
            raise ContractViolation(f"map height {h} must be a positive multiple of 64")
        return maps.astype(self.dtype, copy=False)

    @staticmethod
    def _run(blocks, x, train):
        for b in blocks:
            for layer in b.layers():
                x = layer.forward(x, train)
        return x

    def forward(self, maps: np.ndarray, train: bool = False) -> np.ndarray:
        x = self.check_input(maps)[..., None]
        n, h = x.shape[0], x.shape[1]
        left = self._run(self.left, x, train)  # (n, h, 1, 1)
        right = self.flatten.forward(self._run(self.right, x, train), train)  # (n, h/64, w, 1) -> (n, h, 1, 1)
        merged = np.concatenate([left, right], axis=3)
        out = self._run([self.combiner], merged, train)
        return out.reshape(n, h)

    def backward(self, grad_pred: np.ndarray) -> None:
        """Accumulate parameter gradients for the most recent training forward pass."""
        n, h = grad_pred.shape
        g = grad_pred.reshape(n, h, 1, 1).astype(self.dtype, copy=False)
        idx = len(self.left) + len(self.right)
        g = self._back([self.combiner], g, idx)
        g_left, g_right = g[..., :1], g[..., 1:]
        g_right = self.flatten.backward(np.ascontiguousarray(g_right))
        self._back(self.right, g_right, len(self.left), input_grad=False)
        self._back(self.left, g_left, 0, input_grad=False)

    @staticmethod
    def _back(blocks, g, first_index, input_grad=True):
        for j in range(len(blocks) - 1, -1, -1):
            layers = blocks[j].layers()
            for layer in reversed(layers[1:]):
                g = layer.backward(g)
            g = layers[0].backward(g, input_grad=input_grad or j > 0)
            if g is not None and not np.all(np.isfinite(g)):
                raise TrainingError("non-finite gradient", layer=first_index + j)
            for _, _, pg in blocks[j].conv.params():
                if not np.all(np.isfinite(pg)):
                    raise TrainingError("non-finite parameter gradient", layer=first_index + j)
        return g

    def predict(self, cmap: np.ndarray) -> np.ndarray:
        """Inference on a single H x w map with stored batch-norm statistics."""
        return self.forward(cmap, train=False)[0].astype(np.float64)

    __call__ = predict
