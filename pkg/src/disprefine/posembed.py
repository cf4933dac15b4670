"""Sinusoidal position maps and per-pixel error heatmaps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .grid import ScalarMap, check_same_shape

DEFAULT_N_FREQ = 4
DEFAULT_BASE = 10000.0


@dataclass(frozen=True)
class PositionEmbedding:
    """``channels`` has shape (4*n_freq, H, W).  For frequency i the four
    channels are sin(x w_i), cos(x w_i), sin(y w_i), cos(y w_i)."""

    channels: np.ndarray
    n_freq: int

    @property
    def width(self) -> int:
        return self.channels.shape[2]

    @property
    def height(self) -> int:
        return self.channels.shape[1]

    def channel_names(self) -> list[str]:
        names = []
        for i in range(self.n_freq):
            names += [f"f{i}_sin_x", f"f{i}_cos_x", f"f{i}_sin_y", f"f{i}_cos_y"]
        return names


def frequencies(n_freq: int, base: float) -> np.ndarray:
    i = np.arange(n_freq, dtype=np.float64)
    return 1.0 / base ** (i / n_freq)


def position_maps(
    width: int,
    height: int,
    n_freq: int = DEFAULT_N_FREQ,
    base: float = DEFAULT_BASE,
    normalize: bool = False,
) -> PositionEmbedding:
    """Sin/cos encodings of the column and row index.

    With ``normalize`` the coordinates are ``x / width`` and ``y / height`` so
    the encoding at corresponding points does not depend on resolution.
    """
    if width < 1 or height < 1:
        raise ValueError(f"width and height must be >= 1, got {width}x{height}")
    if n_freq < 1:
        raise ValueError(f"n_freq must be >= 1, got {n_freq}")
    if not base > 1:
        raise ValueError(f"base must be > 1, got {base}")
    x = np.arange(width, dtype=np.float64)
    y = np.arange(height, dtype=np.float64)
    if normalize:
        x = x / width
        y = y / height
    out = np.empty((4 * n_freq, height, width))
    for i, w in enumerate(frequencies(n_freq, base)):
        out[4 * i + 0] = np.sin(x * w)[None, :]
        out[4 * i + 1] = np.cos(x * w)[None, :]
        out[4 * i + 2] = np.sin(y * w)[:, None]
        out[4 * i + 3] = np.cos(y * w)[:, None]
    return PositionEmbedding(out, n_freq)


def error_heatmap(preds: list[ScalarMap], gts: list[ScalarMap]) -> ScalarMap:
    """Per-pixel mean absolute error across frames, counting only frames where
    both maps are valid at that pixel."""
    if not preds or len(preds) != len(gts):
        raise DimensionMismatch(f"need equally long, non-empty lists (got {len(preds)} and {len(gts)})")
    check_same_shape(*preds, *gts)
    errs = np.stack([np.where(p.valid & g.valid, np.abs(p.values - g.values), 0.0) for p, g in zip(preds, gts)])
    count = np.sum([p.valid & g.valid for p, g in zip(preds, gts)], axis=0)
    # sorting fixes the summation order, making the result independent of list order
    total = np.sort(errs, axis=0).sum(axis=0)
    valid = count > 0
    mean = np.divide(total, count, out=np.full(total.shape, np.nan), where=valid)
    return ScalarMap(mean, valid)


def heatmap_to_gray(heat: ScalarMap) -> np.ndarray:
    """Min-max normalise valid pixels to 0..255; invalid pixels become 0."""
    out = np.zeros(heat.shape, dtype=np.uint8)
    if not heat.valid.any():
        return out
    v = heat.values[heat.valid]
    lo, hi = float(v.min()), float(v.max())
    span = hi - lo
    scaled = (heat.values - lo) / span if span > 0 else np.zeros(heat.shape)
    out[heat.valid] = np.floor(np.clip(scaled[heat.valid], 0, 1) * 255 + 0.5).astype(np.uint8)
    return out
