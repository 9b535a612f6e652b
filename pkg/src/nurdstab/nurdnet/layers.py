"""Layer primitives with explicit forward/backward passes.

Activations are NHWC arrays: (batch, rows, cols, channels). Rows are the
angular axis and are padded circularly; columns are padded with zeros.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractViolation


@dataclass(frozen=True)
class ConvSpec:
    kh: int
    kw: int
    cin: int
    cout: int
    stride: tuple[int, int] = (1, 1)
    # (top, bottom, left, right)
    pad: tuple[int, int, int, int] = (0, 0, 0, 0)
    dilation: tuple[int, int] = (1, 1)
    batchnorm: bool = True
    activation: bool = True

    def out_shape(self, h: int, w: int) -> tuple[int, int]:
        sv, sh = self.stride
        dv, dh = self.dilation
        top, bottom, left, right = self.pad
        eh = dv * (self.kh - 1) + 1
        ew = dh * (self.kw - 1) + 1
        ho = (h + top + bottom - eh) // sv + 1
        wo = (w + left + right - ew) // sh + 1
        return ho, wo


def pad_input(x: np.ndarray, pad) -> np.ndarray:
    top, bottom, left, right = pad
    parts = []
    if top:
        parts.append(x[:, x.shape[1] - top:])
    parts.append(x)
    if bottom:
        parts.append(x[:, :bottom])
    if len(parts) > 1:
        x = np.concatenate(parts, axis=1)
    if left or right:
        x = np.pad(x, ((0, 0), (0, 0), (left, right), (0, 0)))
    return x


def unpad_grad(gx: np.ndarray, pad, h: int) -> np.ndarray:
    """Adjoint of ``pad_input``: fold circular halo gradients back onto their rows."""
    top, bottom, left, right = pad
    if left or right:
        gx = gx[:, :, left:gx.shape[2] - right]
    core = gx[:, top:top + h].copy()
    if top:
        core[:, h - top:] += gx[:, :top]
    if bottom:
        core[:, :bottom] += gx[:, top + h:]
    return core


class Conv2D:
    def __init__(self, spec: ConvSpec, dtype=np.float64):
        self.spec = spec
        self.weight = np.zeros((spec.kh, spec.kw, spec.cin, spec.cout), dtype=dtype)
        self.bias = np.zeros(spec.cout, dtype=dtype)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    def params(self):
        return [("weight", self.weight, self.grad_weight), ("bias", self.bias, self.grad_bias)]

    def _columns(self, xp: np.ndarray, ho: int, wo: int) -> np.ndarray:
        s = self.spec
        sv, sh = s.stride
        dv, dh = s.dilation
        n = xp.shape[0]
        cols = np.empty((n, ho, wo, s.kh, s.kw, s.cin), dtype=xp.dtype)
        for a in range(s.kh):
            r0 = a * dv
            for b in range(s.kw):
                c0 = b * dh
                cols[:, :, :, a, b, :] = xp[:, r0:r0 + sv * (ho - 1) + 1:sv, c0:c0 + sh * (wo - 1) + 1:sh, :]
        return cols

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        s = self.spec
        n, h, w, _ = x.shape
        ho, wo = s.out_shape(h, w)
        xp = pad_input(x, s.pad)
        cols = self._columns(xp, ho, wo).reshape(n * ho * wo, -1)
        out = cols @ self.weight.reshape(-1, s.cout) + self.bias
        if train:
            self._cache = (cols, xp.shape, (n, h, w))
        return out.reshape(n, ho, wo, s.cout)

    def backward(self, gout: np.ndarray, input_grad: bool = True) -> np.ndarray | None:
        s = self.spec
        cols, xp_shape, (n, h, w) = self._cache
        ho, wo = gout.shape[1], gout.shape[2]
        g2 = gout.reshape(-1, s.cout)
        self.grad_weight += (cols.T @ g2).reshape(self.weight.shape)
        self.grad_bias += g2.sum(axis=0)
        if not input_grad:
            self._cache = None
            return None
        gcols = (g2 @ self.weight.reshape(-1, s.cout).T).reshape(n, ho, wo, s.kh, s.kw, s.cin)
        gxp = np.zeros(xp_shape, dtype=gout.dtype)
        sv, sh = s.stride
        dv, dh = s.dilation
        for a in range(s.kh):
            r0 = a * dv
            for b in range(s.kw):
                c0 = b * dh
                gxp[:, r0:r0 + sv * (ho - 1) + 1:sv, c0:c0 + sh * (wo - 1) + 1:sh, :] += gcols[:, :, :, a, b, :]
        self._cache = None
        return unpad_grad(gxp, s.pad, h)


class BatchNorm:
    """Per-channel normalization over (batch, rows, cols)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.grad_gamma = np.zeros_like(self.gamma)
        self.grad_beta = np.zeros_like(self.beta)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self._cache = None
        self.last_normalized = None

    def params(self):
        return [("gamma", self.gamma, self.grad_gamma), ("beta", self.beta, self.grad_beta)]

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        if not train:
            xhat = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
            return xhat * self.gamma + self.beta
        axes = (0, 1, 2)
        m = x.shape[0] * x.shape[1] * x.shape[2]
        mu = x.mean(axis=axes)
        xc = x - mu
        var = (xc * xc).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu
        unbiased = var * (m / max(m - 1, 1))
        self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        self._cache = (xhat, inv)
        self.last_normalized = xhat
        return xhat * self.gamma + self.beta

    def backward(self, gout: np.ndarray) -> np.ndarray:
        xhat, inv = self._cache
        axes = (0, 1, 2)
        self.grad_gamma += (gout * xhat).sum(axis=axes)
        self.grad_beta += gout.sum(axis=axes)
        gx_hat = gout * self.gamma
        mean_g = gx_hat.mean(axis=axes)
        mean_gx = (gx_hat * xhat).mean(axis=axes)
        self._cache = None
        self.last_normalized = None
        return inv * (gx_hat - mean_g - xhat * mean_gx)


class LeakyReLU:
    def __init__(self, slope: float = 0.01):
        self.slope = slope
        self._mask = None

    def params(self):
        return []

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        pos = x > 0
        if train:
            self._mask = pos
        return np.where(pos, x, x * self.slope)

    def backward(self, gout: np.ndarray) -> np.ndarray:
        g = np.where(self._mask, gout, gout * self.slope)
        self._mask = None
        return g


class RowFlatten:
    """(N, H/s, s, 1) -> (N, H, 1, 1): each row of s values becomes s consecutive rows."""

    def __init__(self):
        self._shape = None

    def params(self):
        return []

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        if x.shape[-1] != 1:
            raise ContractViolation("RowFlatten expects a single channel")
        if train:
            self._shape = x.shape
        n, hs, s, _ = x.shape
        return x.reshape(n, hs * s, 1, 1)

    def backward(self, gout: np.ndarray) -> np.ndarray:
        g = gout.reshape(self._shape)
        self._shape = None
        return g
