"""B-cos layers: unit-norm linear transforms rescaled by |cos(x, w)|^(B-1)."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ShapeError, DegenerateWeightError
from .tensor import Tensor

EPS_NORM = 1e-6


def gamma_for_simple_net(B: float) -> float:
    """Per-layer output scale for the plain CIFAR-style stacks: log10(gamma) = 1.5 B - 1.75."""
    return 10.0 ** (1.5 * B - 1.75)


def gamma_for_deep_net(s: float, fan_in_d: float) -> float:
    """Per-layer output scale s / sqrt(d), with d = k*k*c for a conv layer."""
    return s / math.sqrt(fan_in_d)


def normalize_weights(raw) -> Tensor:
    """Scale every row (first-axis slice) of ``raw`` to unit Euclidean norm."""
    raw = T.as_tensor(raw)
    rows = raw.shape[0]
    flat = T.reshape(raw, (rows, -1))
    norms = np.sqrt((flat.data.astype(np.float64) ** 2).sum(axis=1))
    bad = np.flatnonzero(norms < 1e-12)
    if bad.size:
        raise DegenerateWeightError(int(bad[0]), float(norms[bad[0]]))
    n = T.sqrt(T.reduce(flat * flat, 1, "sum", keepdims=True))
    return T.reshape(flat / n, raw.shape)


def maxout_reduce(units, m: int, axis: int = -1) -> Tensor:
    """Max over consecutive groups of ``m`` units along ``axis``."""
    units = T.as_tensor(units)
    axis = axis % units.ndim
    size = units.shape[axis]
    if m < 1 or size % m:
        raise ShapeError(f"maxout: dimension {size} not divisible by m={m}", units.shape)
    if m == 1:
        return units
    split = units.shape[:axis] + (size // m, m) + units.shape[axis + 1:]
    return T.reduce(T.reshape(units, split), axis + 1, "max")


def _scaling(cos: Tensor, B: float) -> Tensor:
    if B == 2:
        return T.absolute(cos)
    return T.pow(T.absolute(cos), B - 1)


class _BcosBase:
    weight: Tensor
    B: float
    gamma: float
    maxout: int

    def parameters(self) -> list[Tensor]:
        return [self.weight]

    def normalized_weight(self) -> Tensor:
        return normalize_weights(self.weight)

    def _finish(self, lin: Tensor, norm: Tensor | None, frozen: bool, axis: int) -> Tensor:
        if self.B == 1:
            out = lin
        else:
            scale = _scaling(lin / norm, self.B)
            if frozen:
                scale = T.detach(scale)
            out = scale * lin
        if self.gamma != 1:
            out = out * self.gamma
        return maxout_reduce(out, self.maxout, axis=axis)


class BcosDense(_BcosBase):
    """Dense B-cos layer, weight shape [out * maxout, in]."""

    def __init__(self, in_features, out_features, B=2.0, gamma=1.0, maxout=1,
                 eps_norm=EPS_NORM, weight=None, rng=None, dtype=np.float32):
        if B < 1:
            raise ValueError(f"B must be >= 1, got {B}")
        self.in_features, self.out_features = in_features, out_features
        self.B, self.gamma, self.maxout, self.eps_norm = float(B), float(gamma), int(maxout), eps_norm
        shape = (out_features * maxout, in_features)
        if weight is None:
            rng = np.random.default_rng(rng)
            u = 1 / math.sqrt(in_features)
            weight = rng.uniform(-u, u, size=shape)
        weight = np.asarray(weight, dtype=dtype)
        if weight.shape != shape:
            raise ShapeError(f"dense weight must be {shape}, got {weight.shape}", weight.shape)
        self.weight = Tensor(weight, requires_grad=True)

    def __call__(self, x, frozen=False):
        return self.forward(x, frozen)

    def forward(self, x, frozen: bool = False) -> Tensor:
        """gamma * |cos(x, w_n)|^(B-1) * w_n.x per unit, then MaxOut.

        With ``frozen`` the rescaling factor is detached, so the input gradient
        of each output is exactly its effective linear row.
        """
        x = T.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"dense layer expects [batch, {self.in_features}], got {x.shape}",
                             x.shape)
        w = self.normalized_weight()
        lin = T.matmul(x, T.transpose(w, (1, 0)))
        norm = None
        if self.B != 1:
            norm = T.maximum(T.sqrt(T.reduce(x * x, 1, "sum", keepdims=True)), self.eps_norm)
        return self._finish(lin, norm, frozen, axis=1)

    def describe(self) -> dict:
        return {"kind": "dense", "in": self.in_features, "out": self.out_features,
                "B": self.B, "gamma": self.gamma, "maxout": self.maxout,
                "eps_norm": self.eps_norm}


class BcosConv2d(_BcosBase):
    """Convolutional B-cos layer, kernel shape [out * maxout, in, k, k]."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 B=2.0, gamma=1.0, maxout=1, eps_norm=EPS_NORM, weight=None, rng=None,
                 dtype=np.float32):
        if B < 1:
            raise ValueError(f"B must be >= 1, got {B}")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        self.B, self.gamma, self.maxout, self.eps_norm = float(B), float(gamma), int(maxout), eps_norm
        shape = (out_channels * maxout, in_channels, kernel_size, kernel_size)
        if weight is None:
            rng = np.random.default_rng(rng)
            u = 1 / math.sqrt(in_channels * kernel_size ** 2)
            weight = rng.uniform(-u, u, size=shape)
        weight = np.asarray(weight, dtype=dtype)
        if weight.shape != shape:
            raise ShapeError(f"conv kernel must be {shape}, got {weight.shape}", weight.shape)
        self.weight = Tensor(weight, requires_grad=True)

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_size ** 2

    def __call__(self, x, frozen=False):
        return self.forward(x, frozen)

    def forward(self, x, frozen: bool = False) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"conv layer expects [N, {self.in_channels}, H, W], got {x.shape}",
                             x.shape)
        k, s, p = self.kernel_size, self.stride, self.padding
        lin = T.conv2d(x, self.normalized_weight(), s, p)
        norm = None
        if self.B != 1:
            sq = T.reduce(x * x, 1, "sum", keepdims=True)
            norm = T.sqrt(T.sumpool2d(sq, k, s, p) + self.eps_norm ** 2)
        return self._finish(lin, norm, frozen, axis=1)

    def output_shape(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        return T.output_size(h, k, s, p), T.output_size(w, k, s, p)

    def describe(self) -> dict:
        return {"kind": "conv", "in": self.in_channels, "out": self.out_channels,
                "k": self.kernel_size, "stride": self.stride, "padding": self.padding,
                "B": self.B, "gamma": self.gamma, "maxout": self.maxout,
                "eps_norm": self.eps_norm}
