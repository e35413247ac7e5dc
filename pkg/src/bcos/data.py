"""Datasets: procedural coloured shapes and the CIFAR-10 binary batches."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .encoding import encode_rgb6
from .errors import DatasetError

SHAPES = ("circle", "square", "triangle", "cross")
PALETTE = np.array([
    [0.90, 0.10, 0.10],  # red
    [0.10, 0.80, 0.15],  # green
    [0.15, 0.25, 0.95],  # blue
    [0.95, 0.85, 0.10],  # yellow
    [0.85, 0.15, 0.85],  # magenta
    [0.10, 0.85, 0.85],  # cyan
    [0.95, 0.55, 0.05],  # orange
    [0.50, 0.10, 0.70],  # purple
    [1.00, 1.00, 1.00],  # white
    [0.00, 0.00, 0.00],  # black
])
ENCODED_BLACK = np.array([0, 0, 0, 1, 1, 1], dtype=np.float32)

CIFAR_RECORD = 3073
CIFAR_BATCH_BYTES = 10000 * CIFAR_RECORD
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]


@dataclass
class Dataset:
    images: np.ndarray                 # [n, 6, H, W] six-channel encoded
    labels: np.ndarray                 # [n] int64
    num_classes: int
    boxes: np.ndarray | None = None    # [n, 4] (y0, x0, y1, x1), end-exclusive
    masks: np.ndarray | None = None    # [n, H, W] bool object masks
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return Dataset(self.images[idx], self.labels[idx], self.num_classes,
                       pick(self.boxes), pick(self.masks), dict(self.meta))


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= 0.8 * r
    if kind == "triangle":
        frac = (dy + r) / (2 * r)
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= r * frac)
    if kind == "cross":
        arm = max(r / 3, 0.75)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise ValueError(kind)


def _background(rng, size: int) -> np.ndarray:
    base = rng.uniform(0.25, 0.75) + rng.uniform(-0.08, 0.08, size=3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    texture = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 3.0, size=2)
        texture += rng.uniform(0.02, 0.06) * np.sin(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    noise = rng.normal(0, 0.03, size=(3, size, size))
    return np.clip(base[:, None, None] + texture[None] + noise, 0, 1)


def class_description(k: int) -> str:
    names = ["red", "green", "blue", "yellow", "magenta", "cyan", "orange", "purple",
             "white", "black"]
    return f"{names[k]} {SHAPES[k % len(SHAPES)]}"


def synth_shapes(seed: int, n: int, K: int = 4, size: int = 16) -> Dataset:
    """Procedural K-class dataset: class k is a shape ``SHAPES[k % 4]`` in colour ``PALETTE[k]``.

    Each object is drawn on a textured background; its tight bounding box and
    mask are recorded for localisation checks.  Classes are assigned round-robin
    before shuffling, so every class holds n // K or n // K + 1 samples.
    """
    if not 2 <= K <= 10:
        raise ValueError(f"K must be in [2, 10], got {K}")
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % K).astype(np.int64)
    rgb = np.empty((n, 3, size, size), dtype=np.float64)
    masks = np.zeros((n, size, size), dtype=bool)
    boxes = np.zeros((n, 4), dtype=np.int64)
    for i, k in enumerate(labels):
        img = _background(rng, size)
        r = rng.uniform(0.2, 0.3) * size
        cy, cx = rng.uniform(r, size - 1 - r, size=2)
        m = _shape_mask(SHAPES[k % len(SHAPES)], size, cy, cx, r)
        color = np.clip(PALETTE[k] + rng.uniform(-0.05, 0.05, size=3), 0, 1)
        img[:, m] = color[:, None]
        ys, xs = np.nonzero(m)
        rgb[i], masks[i] = img, m
        boxes[i] = ys.min(), xs.min(), ys.max() + 1, xs.max() + 1
    images = encode_rgb6(rgb.astype(np.float32))
    return Dataset(images, labels, K, boxes, masks,
                   {"source": "synth", "seed": seed, "size": size})


def synth_split(seed: int, n_train: int, n_test: int, K: int = 4, size: int = 16):
    """Disjointly seeded train and test sets."""
    s_train, s_test = np.random.SeedSequence(seed).generate_state(2)
    train = synth_shapes(int(s_train), n_train, K, size)
    test = synth_shapes(int(s_test), n_test, K, size)
    train.meta["split"], test.meta["split"] = "train", "test"
    return train, test


def parse_cifar10_batch(raw: bytes, name: str = "<bytes>"):
    if len(raw) != CIFAR_BATCH_BYTES:
        raise DatasetError(f"{name}: expected {CIFAR_BATCH_BYTES} bytes, found {len(raw)}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetError(f"{name}: label byte {labels.max()} outside [0, 9]")
    pixels = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return pixels, labels


def load_cifar10(directory, split: str = "train", limit: int | None = None) -> Dataset:
    """Read the binary CIFAR-10 batches (1 label byte + 3072 channel-major pixel bytes)."""
    files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    if not os.path.isdir(directory):
        raise DatasetError(f"CIFAR-10 directory {directory} does not exist")
    xs, ys = [], []
    for name in files:
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise DatasetError(f"missing CIFAR-10 file {path}")
        with open(path, "rb") as fh:
            px, lab = parse_cifar10_batch(fh.read(), path)
        xs.append(px)
        ys.append(lab)
        if limit is not None and sum(len(y) for y in ys) >= limit:
            break
    pixels, labels = np.concatenate(xs), np.concatenate(ys)
    if limit is not None:
        pixels, labels = pixels[:limit], labels[:limit]
    return Dataset(encode_rgb6(pixels), labels, 10, meta={"source": "cifar10", "split": split,
                                                          "path": str(directory)})


def augment_batch(images, rng, hflip: bool = False, pad: int = 0, boxes=None):
    """Random horizontal flips and padded random crops (padding with encoded black).

    Returns ``(images, boxes)``; boxes follow the same flips and shifts and are
    clipped to the image.
    """
    images = np.array(images, copy=True)
    n, c, h, w = images.shape
    boxes = None if boxes is None else np.array(boxes, copy=True)
    if hflip:
        flip = rng.random(n) < 0.5
        images[flip] = images[flip][..., ::-1]
        if boxes is not None:
            x0, x1 = boxes[flip, 1].copy(), boxes[flip, 3].copy()
            boxes[flip, 1], boxes[flip, 3] = w - x1, w - x0
    if pad:
        fill = ENCODED_BLACK[:c] if c == 6 else np.zeros(c, dtype=images.dtype)
        padded = np.empty((n, c, h + 2 * pad, w + 2 * pad), dtype=images.dtype)
        padded[:] = fill[None, :, None, None]
        padded[:, :, pad:pad + h, pad:pad + w] = images
        offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
        for i, (dy, dx) in enumerate(offs):
            images[i] = padded[i, :, dy:dy + h, dx:dx + w]
        if boxes is not None:
            shift = pad - offs
            boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]] + shift[:, :1], 0, h)
            boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]] + shift[:, 1:], 0, w)
    return images, boxes
