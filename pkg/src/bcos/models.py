"""Concrete B-cos network stacks, temperature/bias policy and checkpoint IO."""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import (CheckpointChecksumError, CheckpointTruncatedError,
                     CheckpointVersionError, ShapeError)
from .layers import BcosConv2d, BcosDense, gamma_for_simple_net
from .tensor import Tensor

# log10(T) as tabulated for the 9-layer CIFAR-10 stack
LOG10_T_TABLE = {1.0: -3.0, 1.25: -3.0, 1.5: -2.0, 1.75: 1.0, 2.0: 2.0, 2.25: 2.0, 2.5: 3.0}

CIFAR9_KERNELS = [3, 3, 3, 3, 3, 3, 3, 3, 1]
CIFAR9_STRIDES = [1, 1, 2, 1, 1, 2, 1, 1, 1]
CIFAR9_PADDING = [1, 1, 1, 1, 1, 1, 1, 1, 0]
CIFAR9_CHANNELS = [64, 64, 128, 128, 128, 256, 256, 256, 10]

ENCODING_CHANNELS = {"rgb6": 6, "raw": 3}


def temperature_for(B: float) -> float:
    """Output temperature; log10-linear interpolation between tabulated B values."""
    bs = sorted(LOG10_T_TABLE)
    return 10.0 ** float(np.interp(B, bs, [LOG10_T_TABLE[b] for b in bs]))


def stable_sigmoid(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e))


def uniform_output_bias(num_classes: int) -> float:
    """Bias giving sigmoid(b) = 1/K so that a zero input yields uniform class probabilities."""
    if num_classes >= 100:
        return math.log(0.01 / 0.99)
    p = 1.0 / num_classes
    return math.log(p / (1 - p))


@dataclass
class NetworkSpec:
    layers: list[dict]
    temperature: float
    output_bias: float
    num_classes: int
    input_encoding: str = "rgb6"
    name: str = "custom"
    B: float | None = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.input_encoding not in ENCODING_CHANNELS:
            raise ValueError(f"unknown input encoding {self.input_encoding!r}")
        chans = ENCODING_CHANNELS[self.input_encoding]
        for i, layer in enumerate(self.layers):
            if layer["in"] != chans:
                raise ShapeError(f"layer {i + 1} expects {layer['in']} inputs but receives {chans}",
                                 (layer["in"],), (chans,))
            chans = layer["out"]
        if chans != self.num_classes:
            raise ShapeError(f"final layer emits {chans} outputs, expected {self.num_classes} classes",
                             (chans,), (self.num_classes,))

    def to_dict(self) -> dict:
        return {"layers": self.layers, "temperature": self.temperature,
                "output_bias": self.output_bias, "num_classes": self.num_classes,
                "input_encoding": self.input_encoding, "name": self.name, "B": self.B}


def _conv_layers(B, maxout, kernels, strides, padding, channels, in_ch, gamma):
    layers = []
    for k, s, p, o in zip(kernels, strides, padding, channels):
        layers.append({"kind": "conv", "in": in_ch, "out": o, "k": k, "stride": s,
                       "padding": p, "B": float(B), "gamma": gamma, "maxout": maxout,
                       "eps_norm": 1e-6})
        in_ch = o
    return layers


def cifar9_spec(B: float = 2.0, maxout: int = 1, num_classes: int = 10) -> NetworkSpec:
    channels = CIFAR9_CHANNELS[:-1] + [num_classes]
    layers = _conv_layers(B, maxout, CIFAR9_KERNELS, CIFAR9_STRIDES, CIFAR9_PADDING, channels,
                          6, gamma_for_simple_net(B))
    return NetworkSpec(layers, temperature_for(B), uniform_output_bias(num_classes),
                       num_classes, "rgb6", "cifar9", float(B))


def tiny_spec(B: float = 2.0, maxout: int = 1, channels: int = 16,
              num_classes: int = 4) -> NetworkSpec:
    if channels < 4:
        raise ValueError("tiny net needs channels >= 4")
    layers = _conv_layers(B, maxout, [3, 3, 3, 1], [1, 2, 2, 1], [1, 1, 1, 0],
                          [channels, channels, channels, num_classes], 6,
                          gamma_for_simple_net(B))
    return NetworkSpec(layers, temperature_for(B), uniform_output_bias(num_classes),
                       num_classes, "rgb6", "tiny", float(B))


def _layer_from_dict(d: dict, rng, dtype, weight=None):
    if d["kind"] == "conv":
        return BcosConv2d(d["in"], d["out"], d["k"], d["stride"], d["padding"], B=d["B"],
                          gamma=d["gamma"], maxout=d["maxout"], eps_norm=d["eps_norm"],
                          weight=weight, rng=rng, dtype=dtype)
    if d["kind"] == "dense":
        return BcosDense(d["in"], d["out"], B=d["B"], gamma=d["gamma"], maxout=d["maxout"],
                         eps_norm=d["eps_norm"], weight=weight, rng=rng, dtype=dtype)
    raise ValueError(f"unknown layer kind {d['kind']!r}")


class BcosNetwork:
    """A stack of B-cos layers followed by global sum pooling and division by T.

    The output bias ``b`` is not part of the logits; the loss and the
    probability helpers add it before the sigmoid.
    """

    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=np.float32, weights=None):
        self.spec = spec
        self.seed = seed
        rng = np.random.default_rng(seed)
        weights = weights or [None] * len(spec.layers)
        self.layers = [_layer_from_dict(d, rng, dtype, w) for d, w in zip(spec.layers, weights)]
        self.meta: dict = {}

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def temperature(self) -> float:
        return self.spec.temperature

    @property
    def bias(self) -> float:
        return self.spec.output_bias

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def __len__(self):
        return len(self.layers)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def astype(self, dtype) -> "BcosNetwork":
        """Copy of the network with weights cast to ``dtype``."""
        net = BcosNetwork(self.spec, self.seed, dtype,
                          [layer.weight.data.astype(dtype) for layer in self.layers])
        net.meta = dict(self.meta)
        return net

    def _check_input(self, x: Tensor):
        want = ENCODING_CHANNELS[self.spec.input_encoding]
        if x.ndim != 4 or x.shape[1] != want:
            raise ShapeError(f"expected [N, {want}, H, W] input in {self.spec.input_encoding} "
                             f"encoding, got {x.shape}", x.shape)

    def features(self, x, upto: int | None = None, frozen: bool = False) -> Tensor:
        """Activation map after layer ``upto`` (1-based; default: all layers)."""
        x = T.as_tensor(x)
        self._check_input(x)
        upto = len(self.layers) if upto is None else upto
        for layer in self.layers[:upto]:
            x = layer(x, frozen=frozen)
        return x

    def forward_logits(self, x, frozen: bool = False) -> Tensor:
        """Global sum pool over the final spatial map divided by T: shape [N, K]."""
        out = self.features(x, frozen=frozen)
        if out.ndim == 4:
            out = T.reduce(out, (2, 3), "sum")
        return out * (1.0 / self.temperature)

    __call__ = forward_logits

    def predict_proba(self, x) -> np.ndarray:
        with T.no_grad():
            z = self.forward_logits(x).data.astype(np.float64) + self.bias
        return stable_sigmoid(z)

    def logits_numpy(self, x, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x.data if isinstance(x, Tensor) else x)
        outs = []
        with T.no_grad():
            for i in range(0, len(x), batch_size):
                outs.append(self.forward_logits(Tensor(x[i:i + batch_size].astype(self.dtype))).data)
        return np.concatenate(outs)


def build_cifar9(B: float = 2.0, maxout: int = 1, seed: int = 0, dtype=np.float32,
                 num_classes: int = 10) -> BcosNetwork:
    return BcosNetwork(cifar9_spec(B, maxout, num_classes), seed, dtype)


def build_tiny(B: float = 2.0, maxout: int = 1, channels: int = 16, num_classes: int = 4,
               seed: int = 0, dtype=np.float32) -> BcosNetwork:
    return BcosNetwork(tiny_spec(B, maxout, channels, num_classes), seed, dtype)


# checkpoint layout: b"BCOS" | u16 version | u32 meta length | meta (utf-8 json)
#                    | float32 LE payload per layer weight | u32 crc32 of everything before
MAGIC = b"BCOS"
VERSION = 1


def save_checkpoint(net: BcosNetwork, path) -> None:
    meta = {"spec": net.spec.to_dict(), "B": net.spec.B, "seed": net.seed,
            "shapes": [list(layer.weight.shape) for layer in net.layers],
            "training": net.meta}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(blob)), blob]
    parts += [layer.weight.data.astype("<f4").tobytes() for layer in net.layers]
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path, expect_B: float | None = None) -> BcosNetwork:
    """Load a network; ``expect_B`` guards against loading a model trained with another B."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 14:
        raise CheckpointTruncatedError(f"{path}: file too short ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise CheckpointVersionError(f"{path}: bad magic {raw[:4]!r}")
    version, meta_len = struct.unpack("<HI", raw[4:10])
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version}")
    if len(raw) < 10 + meta_len + 4:
        raise CheckpointTruncatedError(f"{path}: truncated metadata")
    try:
        meta = json.loads(raw[10:10 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        meta = None
    shapes = [tuple(s) for s in meta["shapes"]] if meta else []
    expected = 10 + meta_len + sum(4 * int(np.prod(s)) for s in shapes) + 4
    if meta is not None and len(raw) < expected:
        raise CheckpointTruncatedError(f"{path}: expected {expected} bytes, found {len(raw)}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc or meta is None or len(raw) != expected:
        raise CheckpointChecksumError(f"{path}: checksum mismatch")

    spec = NetworkSpec(**meta["spec"])
    layer_bs = {float(d["B"]) for d in spec.layers}
    if spec.B is not None and layer_bs != {float(spec.B)}:
        raise CheckpointVersionError(f"{path}: header B={spec.B} disagrees with layer B {layer_bs}")
    if expect_B is not None and spec.B is not None and float(expect_B) != float(spec.B):
        raise CheckpointVersionError(f"{path}: checkpoint has B={spec.B}, expected B={expect_B}")

    weights, off = [], 10 + meta_len
    for s in shapes:
        n = int(np.prod(s))
        weights.append(np.frombuffer(raw, "<f4", n, off).reshape(s).astype(np.float32))
        off += 4 * n
    net = BcosNetwork(spec, meta["seed"], np.float32, weights)
    net.meta = meta.get("training", {})
    return net
