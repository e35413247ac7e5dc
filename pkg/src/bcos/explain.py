"""Extraction of the input-dependent linear map computed by a B-cos network.

Every B-cos layer is a linear transform whose rows are rescaled by factors that
depend on the input.  Freezing those factors (and the MaxOut selections) at
their forward values turns the network into a plain linear map of ``x``, whose
rows are recovered with one backward pass per target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import TargetError
from .models import BcosNetwork
from .tensor import Tensor


@dataclass(frozen=True)
class Target:
    layer: int
    neuron: int
    position: tuple[int, int] | None = None


@dataclass
class DynamicLinearMap:
    row: np.ndarray          # effective weights, same shape as the input sample
    bias: float
    target: Target
    input_ref: np.ndarray
    activation: float       # actual output of the target at input_ref (bias included)

    def apply(self) -> float:
        return float(np.sum(self.row.astype(np.float64) * self.input_ref)) + self.bias


@dataclass
class ContributionMap:
    values: np.ndarray       # [H, W] signed per-pixel contributions
    bias: float
    target: Target
    activation: float
    input_ref: np.ndarray | None = None

    def total(self) -> float:
        return float(self.values.astype(np.float64).sum()) + self.bias


def _as_batch(x, dtype) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.ndim == 3:
        x = x[None]
    return x.astype(dtype, copy=False)


def _layer_shape(net: BcosNetwork, layer: int, hw) -> tuple[int, int, int]:
    h, w = hw
    for lay in net.layers[:layer]:
        h, w = lay.output_shape(h, w)
    return net.layers[layer - 1].out_channels, h, w


def _validate(net: BcosNetwork, target: Target, hw):
    L = len(net)
    if not 1 <= target.layer <= L:
        raise TargetError(f"layer {target.layer} outside 1..{L}")
    c, h, w = _layer_shape(net, target.layer, hw)
    if not 0 <= target.neuron < c:
        raise TargetError(f"neuron {target.neuron} invalid at layer {target.layer} ({c} channels)")
    if target.position is not None:
        if target.layer == L:
            raise TargetError("class logits are spatially pooled; no position allowed")
        i, j = target.position
        if not (0 <= i < h and 0 <= j < w):
            raise TargetError(f"position {target.position} outside {h}x{w} map of layer {target.layer}")


def _frozen_forward(net: BcosNetwork, xb: np.ndarray, layer: int):
    xt = Tensor(xb, requires_grad=True)
    with T.parameters_requiring_grad(net.parameters(), False):
        if layer == len(net):
            out = net.forward_logits(xt, frozen=True)
        else:
            out = net.features(xt, upto=layer, frozen=True)
    return xt, out


def _seed(out: Tensor, target: Target, rows) -> np.ndarray:
    seed = np.zeros(out.shape, dtype=out.dtype)
    idx = np.arange(len(rows))
    if out.ndim == 2:
        seed[idx, rows] = 1
    elif target.position is None:
        seed[idx, rows] = 1
    else:
        seed[idx, rows, target.position[0], target.position[1]] = 1
    return seed


def _activation(out: np.ndarray, target: Target, rows) -> np.ndarray:
    idx = np.arange(len(rows))
    if out.ndim == 2:
        return out[idx, rows]
    if target.position is None:
        return out[idx, rows].sum(axis=(1, 2))
    return out[idx, rows, target.position[0], target.position[1]]


def collapse_batch(net: BcosNetwork, x, neurons, layer: int | None = None,
                   position=None) -> tuple[np.ndarray, np.ndarray]:
    """Effective rows for a batch of samples, one target neuron per sample.

    Samples do not interact in the forward pass, so a single backward pass
    seeded with one target per sample yields every row at once.
    Returns ``(rows, activations)``; activations exclude the output bias.
    """
    xb = _as_batch(x, net.dtype)
    layer = len(net) if layer is None else layer
    neurons = np.broadcast_to(np.asarray(neurons, dtype=int), (len(xb),))
    for n in np.unique(neurons):
        _validate(net, Target(layer, int(n), position), xb.shape[2:])
    xt, out = _frozen_forward(net, xb, layer)
    target = Target(layer, 0, position)
    out.backward(_seed(out, target, neurons))
    return xt.grad, _activation(out.data, target, neurons)


def collapse_all_classes(net: BcosNetwork, x) -> tuple[np.ndarray, np.ndarray]:
    """Rows for every class: returns ``(rows [K, N, C, H, W], logits [N, K])``.

    One forward pass and one backward pass per class.
    """
    xb = _as_batch(x, net.dtype)
    xt, out = _frozen_forward(net, xb, len(net))
    rows = []
    for c in range(net.num_classes):
        seed = np.zeros(out.shape, dtype=out.dtype)
        seed[:, c] = 1
        out.backward(seed)
        rows.append(xt.grad)
    return np.stack(rows), out.data


def collapse(net: BcosNetwork, x, layer: int | None = None, neuron: int = 0,
             position=None) -> DynamicLinearMap:
    """Effective linear row of one neuron (or class logit) at the single input ``x``.

    ``layer`` is 1-based and defaults to the output layer, where ``neuron`` is
    a class index and the map carries the output bias.  For hidden layers a
    neuron is a channel, either at ``position`` or summed over space.
    """
    xb = _as_batch(x, net.dtype)
    if len(xb) != 1:
        raise TargetError("collapse expects a single sample")
    layer = len(net) if layer is None else layer
    position = tuple(position) if position is not None else None
    target = Target(layer, int(neuron), position)
    rows, act = collapse_batch(net, xb, [neuron], layer, position)
    bias = net.bias if layer == len(net) else 0.0
    return DynamicLinearMap(rows[0], bias, target, xb[0], float(act[0]) + bias)


def contribution_map(m: DynamicLinearMap) -> ContributionMap:
    """Channel-summed ``row * x``; values sum (plus bias) to the target activation."""
    values = (m.row * m.input_ref).sum(axis=0)
    return ContributionMap(values, m.bias, m.target, m.activation, m.input_ref)


def delta_explanation(m1, m2) -> ContributionMap:
    """Difference of two contribution maps computed at the same input and layer."""
    c1 = m1 if isinstance(m1, ContributionMap) else contribution_map(m1)
    c2 = m2 if isinstance(m2, ContributionMap) else contribution_map(m2)
    if (c1.input_ref is None or c2.input_ref is None
            or c1.input_ref.shape != c2.input_ref.shape
            or not np.array_equal(c1.input_ref, c2.input_ref)):
        raise TargetError("delta explanation needs both maps computed at the same input")
    if c1.target.layer != c2.target.layer:
        raise TargetError("delta explanation needs both maps at the same layer")
    return ContributionMap(c1.values - c2.values, c1.bias - c2.bias, c1.target,
                           c1.activation - c2.activation, c1.input_ref)


def layer_activations(net: BcosNetwork, x, layer: int, batch_size: int = 128) -> np.ndarray:
    xb = _as_batch(x, net.dtype)
    outs = []
    with T.no_grad():
        for i in range(0, len(xb), batch_size):
            outs.append(net.features(Tensor(xb[i:i + batch_size]), upto=layer).data)
    return np.concatenate(outs)


def intermediate_neuron_explanations(net: BcosNetwork, dataset, layer: int, top_k: int = 1,
                                     neurons=None):
    """For each channel at ``layer``, the ``top_k`` inputs maximizing its peak activation.

    Returns a list of ``(neuron, sample_index, DynamicLinearMap)`` where each map
    explains the channel at its most active position for that sample.
    """
    images = getattr(dataset, "images", dataset)
    acts = layer_activations(net, images, layer)
    n, c, h, w = acts.shape
    flat = acts.reshape(n, c, h * w)
    peak = flat.max(axis=2)
    where = flat.argmax(axis=2)
    out = []
    for ch in (range(c) if neurons is None else neurons):
        order = np.argsort(-peak[:, ch], kind="stable")[:top_k]
        for idx in order:
            pos = divmod(int(where[idx, ch]), w)
            m = collapse(net, images[idx], layer, ch, pos)
            out.append((ch, int(idx), m))
    return out
