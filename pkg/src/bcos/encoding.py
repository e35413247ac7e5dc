"""Six-channel pixel encoding, colour decoding of explanation rows, image files."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .errors import BcosError, EncodingRangeError

ALPHA_PERCENTILE = 99.9
_POS_EPS = 1e-12


def encode_rgb6(img) -> np.ndarray:
    """[3, H, W] (or [N, 3, H, W]) in [0, 1] -> [r, g, b, 1-r, 1-g, 1-b] channels."""
    img = np.asarray(img)
    if img.ndim not in (3, 4) or img.shape[-3] != 3:
        raise EncodingRangeError(f"expected [3, H, W] or [N, 3, H, W] image, got {img.shape}")
    if not np.issubdtype(img.dtype, np.floating):
        img = img.astype(np.float32)
    lo, hi = float(img.min()), float(img.max())
    if lo < 0 or hi > 1 or np.isnan(img).any():
        raise EncodingRangeError(f"pixel values must lie in [0, 1], got range [{lo}, {hi}]")
    comp = 1 - img
    # 1 - comp is exact, so every pair sums to exactly 1 (not just after rounding)
    return np.concatenate([1 - comp, comp], axis=-3)


def decode_rgb6(enc) -> np.ndarray:
    """Inverse of ``encode_rgb6`` on valid encodings: the first three channels."""
    return np.asarray(enc)[..., :3, :, :]


def decode_row_to_color(row, percentile: float = ALPHA_PERCENTILE) -> np.ndarray:
    """Colour an explanation row by the angle of each [c, 1-c] channel pair.

    Returns an [H, W, 4] RGBA array in [0, 1].  Colour channel c is
    pos(w_c) / (pos(w_c) + pos(w_c+3)); pairs without positive weight decode
    to 0.5.  Alpha is the per-pixel weight norm over its ``percentile`` value.
    """
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 3 or row.shape[0] != 6:
        raise ValueError(f"expected a [6, H, W] row, got {row.shape}")
    pos = np.maximum(row, 0)
    a, b = pos[:3], pos[3:]
    denom = a + b
    rgb = np.where(denom > 0, a / (denom + _POS_EPS), 0.5)
    norm = np.sqrt((row ** 2).sum(axis=0))
    ref = np.percentile(norm, percentile)
    alpha = np.clip(norm / ref, 0, 1) if ref > 0 else np.zeros_like(norm)
    return np.concatenate([rgb.transpose(1, 2, 0), alpha[..., None]], axis=-1)


def to_uint8(img) -> np.ndarray:
    """[0, 1] floats to bytes, rounding half to even."""
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def composite(rgba, background=1.0) -> np.ndarray:
    """Flatten RGBA onto a uniform background, giving [H, W, 3]."""
    rgba = np.asarray(rgba, dtype=np.float64)
    a = rgba[..., 3:4]
    return rgba[..., :3] * a + background * (1 - a)


def ppm_bytes(img) -> bytes:
    """Binary P6 encoding of an [H, W, 3] float image in [0, 1]."""
    u8 = to_uint8(img)
    if u8.ndim != 3 or u8.shape[2] != 3:
        raise ValueError(f"PPM needs [H, W, 3] pixels, got {u8.shape}")
    h, w = u8.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + u8.tobytes()


def write_image(img, path, fmt: str | None = None) -> None:
    """Write [H, W, 3] (PPM or PNG) or [H, W, 4] (PNG only; PPM drops alpha by compositing)."""
    fmt = (fmt or os.path.splitext(str(path))[1].lstrip(".") or "ppm").lower()
    img = np.asarray(img)
    try:
        if fmt == "ppm":
            if img.shape[-1] == 4:
                img = composite(img)
            with open(path, "wb") as fh:
                fh.write(ppm_bytes(img))
        elif fmt == "png":
            u8 = to_uint8(img)
            mode = "RGBA" if u8.shape[-1] == 4 else "RGB"
            Image.fromarray(u8, mode).save(path, format="PNG", optimize=False)
        else:
            raise ValueError(f"unsupported image format {fmt!r}")
    except OSError as exc:
        raise BcosError(f"cannot write image {path}: {exc}") from exc


def read_image(path) -> np.ndarray:
    """Read a PPM/PNG file as a [3, H, W] float array in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise BcosError(f"cannot read image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


def contribution_rgb(values, limit: float | None = None) -> np.ndarray:
    """Red (positive) / blue (negative) rendering of a signed [H, W] map."""
    values = np.asarray(values, dtype=np.float64)
    limit = limit or float(np.abs(values).max()) or 1.0
    v = np.clip(values / limit, -1, 1)
    r = np.where(v > 0, 1.0, 1.0 + v)
    b = np.where(v < 0, 1.0, 1.0 - v)
    g = 1.0 - np.abs(v)
    return np.stack([r, g, b], axis=-1)
