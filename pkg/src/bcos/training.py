"""Loss, optimiser, learning-rate schedule and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset, augment_batch
from .errors import NaNLossError, ShapeError
from .models import BcosNetwork, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "lr", "loss", "train_acc", "test_acc"]


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr_init: float = 1e-3
    lr_final: float = 1e-5
    seed: int = 0
    B: float = 2.0
    maxout: int = 1
    hflip: bool = False
    pad_crop: int = 0
    dataset: str = "synth"
    precision: str = "float32"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.lr_init >= self.lr_final > 0:
            raise ValueError("need lr_init >= lr_final > 0")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")


def _log_sigmoid_terms(z):
    # softplus(z) = max(z, 0) + log1p(exp(-|z|)), stable for any |z|
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def bce_one_vs_all_loss(logits, labels, bias: float) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits + bias) against one-hot labels."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or len(labels) != logits.shape[0]:
        raise ShapeError(f"loss expects [batch, K] logits and batch labels, got {logits.shape} "
                         f"and {labels.shape}", logits.shape, labels.shape)
    n, k = logits.shape
    y = np.zeros((n, k), dtype=logits.dtype)
    y[np.arange(n), labels] = 1
    z = logits.data.astype(np.float64) + bias
    value = np.mean(_log_sigmoid_terms(z) - y * z)
    e = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1 / (1 + e), e / (1 + e))

    def vjp(g):
        return ((g * (sig - y) / (n * k)).astype(logits.dtype),)

    return T._make(np.asarray(value, dtype=logits.dtype), (logits,), vjp, "bce")


def uniform_bce(K: int) -> float:
    """Loss of the all-zero-logit network: every class at probability 1/K."""
    return -(math.log(1 / K) + (K - 1) * math.log(1 - 1 / K)) / K


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns the new parameter arrays."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ShapeError("adam: parameter, gradient and state counts differ")
    state.t += 1
    c1, c2 = 1 - beta1 ** state.t, 1 - beta2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"adam: parameter {i} has shape {p.shape}, gradient {g.shape}, "
                             f"state {state.m[i].shape}", p.shape, g.shape)
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        step = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        out.append((p - step).astype(p.dtype))
    return out


def cosine_lr(epoch: float, epochs: int, lr_init: float, lr_final: float) -> float:
    return lr_final + (lr_init - lr_final) * (1 + math.cos(math.pi * epoch / epochs)) / 2


def accuracy(net: BcosNetwork, ds: Dataset, batch_size: int = 256) -> float:
    logits = net.logits_numpy(ds.images, batch_size)
    return float(np.mean(logits.argmax(axis=1) == ds.labels))


def _check_finite(net: BcosNetwork, logits: Tensor, loss: Tensor, step: int):
    for i, layer in enumerate(net.layers):
        if not np.isfinite(layer.weight.data).all():
            raise NaNLossError(f"non-finite values in layer{i + 1}.weight at step {step}",
                               f"layer{i + 1}.weight", step)
    if not np.isfinite(logits.data).all():
        raise NaNLossError(f"non-finite values in logits at step {step}", "logits", step)
    if not np.isfinite(loss.data).all():
        raise NaNLossError(f"non-finite loss at step {step}", "loss", step)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def train(net: BcosNetwork, dataset: Dataset, config: TrainConfig, test: Dataset | None = None,
          metrics_path=None, checkpoint_path=None):
    """Augment -> forward -> loss -> backward -> Adam, cosine-decayed per step.

    Returns ``(net, rows)`` where rows are dicts with the metrics CSV columns.
    The run is deterministic for a fixed seed.
    """
    if config.precision == "float64" and net.dtype != np.float64:
        net = net.astype(np.float64)
    dtype = net.dtype
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    steps = math.ceil(n / config.batch_size)
    state = AdamState()
    params = net.parameters()
    rows = []
    writer = fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            total, lr0 = 0.0, cosine_lr(epoch, config.epochs, config.lr_init, config.lr_final)
            for s in range(steps):
                idx = order[s * config.batch_size:(s + 1) * config.batch_size]
                xb, _ = augment_batch(dataset.images[idx], rng, config.hflip, config.pad_crop)
                # non-finite values are reported by _check_finite, not as warnings
                with np.errstate(over="ignore", invalid="ignore"):
                    logits = net.forward_logits(Tensor(xb.astype(dtype)))
                    loss = bce_one_vs_all_loss(logits, dataset.labels[idx], net.bias)
                    _check_finite(net, logits, loss, epoch * steps + s)
                    loss.backward()
                    lr = cosine_lr(epoch + s / steps, config.epochs, config.lr_init, config.lr_final)
                    new = adam_step([p.data for p in params], [p.grad for p in params], state, lr)
                for p, d in zip(params, new):
                    p.data = d
                total += float(loss.data) * len(idx)
            row = {"epoch": epoch + 1, "lr": lr0, "loss": total / n,
                   "train_acc": accuracy(net, dataset),
                   "test_acc": accuracy(net, test) if test is not None else None}
            rows.append(row)
            log.info("epoch %d loss %.4f train_acc %.4f", epoch + 1, row["loss"], row["train_acc"])
            if writer:
                writer.writerow([row["epoch"]] + [_fmt(row[k]) for k in METRICS_HEADER[1:]])
                fh.flush()
            if checkpoint_path and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                net.meta = {"config": asdict(config), "epoch": epoch + 1}
                save_checkpoint(net, checkpoint_path)
    finally:
        if fh:
            fh.close()
    net.meta = {"config": asdict(config), "epoch": config.epochs}
    return net, rows
