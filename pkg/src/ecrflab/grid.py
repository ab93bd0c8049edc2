"""Dense grid primitives shared by every other module.

Images are H x W x 3 float arrays in [0, 1], label maps are H x W integer
arrays of class ids, feature maps are H x W x C float arrays.  Model-side
tensors are float32; verification paths recompute in float64.
"""

from __future__ import annotations

import numpy as np
from PIL import Image as PilImage

from .errors import ParameterError, ShapeError

POSITION_FREQ_BASE = 10000.0


def normalize_image(raw: np.ndarray) -> np.ndarray:
    """Scale an 8-bit H x W x 3 image into [0, 1] floats."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3 or raw.shape[0] == 0 or raw.shape[1] == 0:
        raise ShapeError(f"expected non-empty HxWx3 image, got shape {raw.shape}")
    return np.clip(raw.astype(np.float64) / 255.0, 0.0, 1.0)


def position_embedding(height: int, width: int, dim: int) -> np.ndarray:
    """Sinusoidal position field of shape (height, width, dim).

    The first dim/2 channels encode the row index, the rest the column
    index; each half interleaves (sin, cos) pairs over a geometric
    frequency ladder with base 10000.  Per-cell squared norm is dim/2.
    """
    if height <= 0 or width <= 0:
        raise ParameterError("position field dimensions must be positive")
    if dim < 4 or dim % 4 != 0:
        raise ParameterError(f"embedding dim must be a positive multiple of 4, got {dim}")
    half = dim // 2
    pairs = half // 2
    freqs = POSITION_FREQ_BASE ** (-np.arange(pairs, dtype=np.float64) / pairs)

    out = np.empty((height, width, dim), dtype=np.float64)
    rows = np.arange(height, dtype=np.float64)[:, None] * freqs[None, :]
    cols = np.arange(width, dtype=np.float64)[:, None] * freqs[None, :]
    out[:, :, 0:half:2] = np.sin(rows)[:, None, :]
    out[:, :, 1:half:2] = np.cos(rows)[:, None, :]
    out[:, :, half::2] = np.sin(cols)[None, :, :]
    out[:, :, half + 1 :: 2] = np.cos(cols)[None, :, :]
    return out


def downsample_labels(labels: np.ndarray, stride: int, ignore_id: int | None = None) -> np.ndarray:
    """Reduce a label map by majority vote over stride x stride blocks.

    Ties break toward the smallest class id.  When the map does not divide
    evenly it is padded with `ignore_id` (default: max label + 1), which
    never wins a vote against a real label.
    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError(f"label map must be 2-D, got shape {labels.shape}")
    if stride <= 0:
        raise ParameterError(f"stride must be positive, got {stride}")
    h, w = labels.shape
    n_max = int(labels.max(initial=0)) + 1
    pad_id = n_max if ignore_id is None else ignore_id
    ph = (-h) % stride
    pw = (-w) % stride
    if ph or pw:
        labels = np.pad(labels, ((0, ph), (0, pw)), constant_values=pad_id)
        n_max = max(n_max, pad_id + 1)
    hh, ww = labels.shape[0] // stride, labels.shape[1] // stride
    blocks = labels.reshape(hh, stride, ww, stride).transpose(0, 2, 1, 3).reshape(hh, ww, -1)
    # per-block histogram; argmax returns the smallest id on ties
    counts = np.zeros((hh, ww, n_max), dtype=np.int64)
    for k in range(blocks.shape[2]):
        np.add.at(counts, (np.arange(hh)[:, None], np.arange(ww)[None, :], blocks[:, :, k]), 1)
    if ignore_id is None and pad_id < n_max:
        counts[:, :, pad_id] = 0  # padding never outvotes real labels
    return counts.argmax(axis=2).astype(labels.dtype)


def load_image_png(path) -> np.ndarray:
    """Read an 8-bit RGB PNG and return the normalized [0, 1] image."""
    with PilImage.open(path) as im:
        return normalize_image(np.asarray(im.convert("RGB")))


def save_image_png(path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected HxWx3 image, got shape {arr.shape}")
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    PilImage.fromarray(data, mode="RGB").save(path, format="PNG")


def load_labels_png(path) -> np.ndarray:
    """Read an 8-bit gray PNG where the gray value is the class id."""
    with PilImage.open(path) as im:
        return np.asarray(im.convert("L")).astype(np.int64)


def save_labels_png(path, labels: np.ndarray) -> None:
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ShapeError(f"label map must be 2-D, got shape {arr.shape}")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ShapeError("label ids must fit in 8-bit gray")
    PilImage.fromarray(arr.astype(np.uint8), mode="L").save(path, format="PNG")
