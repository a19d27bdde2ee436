"""Prediction over arbitrary regions by blending overlapping tiles."""

from __future__ import annotations

import math

import numpy as np

from .core import DEFAULT_NODATA, Raster
from .raster import FEATURE_CHANNELS, to_tensor
from .segnet import placements, unet_forward


def tile_cover(width: int, height: int, size: int = 96, stride: int = 48) -> list[tuple[int, int]]:
    """(row, col) tile origins at multiples of ``stride``; the last row and
    column are clamped flush to the region edge."""
    if width < size or height < size:
        raise ValueError(f"region {width}x{height} smaller than a {size}x{size} tile")
    return [(r, c) for r in placements(height, size, stride) for c in placements(width, size, stride)]


def blend_weights(size: int = 96) -> np.ndarray:
    """Separable tent, t(i) = min(i + 1, size - i) / ceil(size / 2)."""
    if size < 2:
        raise ValueError("tile size must be at least 2")
    i = np.arange(size)
    t = np.minimum(i + 1, size - i) / math.ceil(size / 2)
    return np.outer(t, t)


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def stitch_predictions(model, features: Raster, size: int = 96, stride: int = 48, channels=None,
                       batch_size: int = 4, forward=None) -> Raster:
    """Per-cell weighted mean of tile probabilities.

    The mean is accumulated as offsets from the first tile's probability in
    each cell, so cells where every tile agrees get that value exactly.

    ``forward`` maps an (N, size, size, d) batch to logits (N, size, size, 1);
    it defaults to the U-Net forward pass of ``model``.
    """
    channels = channels or getattr(model, "channels", None) or FEATURE_CHANNELS
    missing = [c for c in channels if c not in features.channels]
    if missing:
        raise ValueError(f"feature raster lacks channels {missing}")
    if model is not None and hasattr(model, "in_channels") and model.in_channels != len(channels):
        raise ValueError(f"model expects {model.in_channels} channels, raster provides {len(channels)}")
    forward = forward or (lambda batch: unet_forward(model, batch))
    cover = tile_cover(features.width, features.height, size, stride)
    wgt = blend_weights(size)
    acc = np.zeros((features.height, features.width))
    wsum = np.zeros_like(acc)
    base = np.full_like(acc, np.nan)
    for lo in range(0, len(cover), batch_size):
        chunk = cover[lo:lo + batch_size]
        batch = np.stack([to_tensor(features, channels, r, c, size, size) for r, c in chunk])
        probs = _sigmoid(forward(batch)[..., 0])
        for (r, c), p in zip(chunk, probs):
            b = base[r:r + size, c:c + size]
            np.copyto(b, p, where=np.isnan(b))
            acc[r:r + size, c:c + size] += wgt * (p - b)
            wsum[r:r + size, c:c + size] += wgt
    prob = base + acc / wsum
    out = Raster(features.origin, features.cell_size, features.width, features.height,
                 {"prob": prob, "weight": wsum}, {"prob": DEFAULT_NODATA, "weight": DEFAULT_NODATA})
    return out
