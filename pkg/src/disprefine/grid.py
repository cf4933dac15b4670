"""Raster containers and the sampling/warping primitives shared by every stage.

Coordinates follow image convention: ``x`` is the column (increasing to the
right), ``y`` is the row (increasing downward).  Disparity is positive and a
left-view pixel at column ``x`` appears at column ``x - d`` in the right view.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DimensionMismatch, OutOfInteriorError


class PixelPoint(NamedTuple):
    x: float
    y: float


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ScalarMap:
    """H x W real raster with a per-pixel validity flag.

    Non-finite values are always treated as invalid.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"expected a 2-D raster, got shape {values.shape}")
        valid = np.broadcast_to(np.asarray(self.valid, dtype=bool), values.shape).copy()
        valid &= np.isfinite(values)
        object.__setattr__(self, "values", _freeze(values))
        object.__setattr__(self, "valid", _freeze(valid))

    @classmethod
    def from_array(cls, values, valid=None) -> "ScalarMap":
        values = np.asarray(values, dtype=np.float64)
        if valid is None:
            valid = np.ones(values.shape, dtype=bool)
        return cls(values, valid)

    @classmethod
    def full(cls, height: int, width: int, value: float) -> "ScalarMap":
        return cls.from_array(np.full((height, width), value, dtype=np.float64))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def masked(self, fill: float = np.nan) -> np.ndarray:
        """Values with invalid pixels replaced by ``fill``."""
        return np.where(self.valid, self.values, fill)


@dataclass(frozen=True)
class FlowMap:
    """H x W two-channel displacement raster (dx along columns, dy along rows)."""

    dx: np.ndarray
    dy: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        dx = np.array(self.dx, dtype=np.float64)
        dy = np.array(self.dy, dtype=np.float64)
        if dx.ndim != 2 or dx.shape != dy.shape:
            raise ValueError(f"flow channels must be matching 2-D rasters, got {dx.shape} and {dy.shape}")
        valid = np.broadcast_to(np.asarray(self.valid, dtype=bool), dx.shape).copy()
        valid &= np.isfinite(dx) & np.isfinite(dy)
        object.__setattr__(self, "dx", _freeze(dx))
        object.__setattr__(self, "dy", _freeze(dy))
        object.__setattr__(self, "valid", _freeze(valid))

    @classmethod
    def from_arrays(cls, dx, dy, valid=None) -> "FlowMap":
        dx = np.asarray(dx, dtype=np.float64)
        if valid is None:
            valid = np.ones(dx.shape, dtype=bool)
        return cls(dx, dy, valid)

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowMap":
        z = np.zeros((height, width))
        return cls.from_arrays(z, z)

    @property
    def height(self) -> int:
        return self.dx.shape[0]

    @property
    def width(self) -> int:
        return self.dx.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape

    def negated(self) -> "FlowMap":
        return FlowMap(-self.dx, -self.dy, self.valid)

    def channel(self, axis: str) -> ScalarMap:
        return ScalarMap(self.dx if axis == "x" else self.dy, self.valid)


def check_same_shape(*rasters) -> tuple[int, int]:
    shapes = {r.shape for r in rasters}
    if len(shapes) != 1:
        raise DimensionMismatch(f"raster dimensions differ: {sorted(shapes)}")
    return shapes.pop()


def sample_arrays(values: np.ndarray, valid: np.ndarray, xs, ys):
    """Vectorised bilinear lookup of ``values`` at subpixel points.

    A point is valid only if it lies inside ``[0, W-1] x [0, H-1]`` and every
    contributing neighbour is valid.  On an exact integer coordinate the
    neighbour set along that axis collapses to the pixel itself, so integer
    lookups return the stored value and ignore the adjacent column/row.
    """
    h, w = values.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    ok = np.isfinite(xs) & np.isfinite(ys)
    ok &= (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    xc = np.where(ok, xs, 0.0)
    yc = np.where(ok, ys, 0.0)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    fx = xc - x0
    fy = yc - y0
    x1 = np.where(fx > 0, x0 + 1, x0)
    y1 = np.where(fy > 0, y0 + 1, y0)

    v00 = values[y0, x0]
    v01 = values[y0, x1]
    v10 = values[y1, x0]
    v11 = values[y1, x1]
    ok &= valid[y0, x0] & valid[y0, x1] & valid[y1, x0] & valid[y1, x1]

    top = (1.0 - fx) * v00 + fx * v01
    bottom = (1.0 - fx) * v10 + fx * v11
    out = (1.0 - fy) * top + fy * bottom
    return np.where(ok, out, np.nan), ok


def sample_grad_arrays(values: np.ndarray, valid: np.ndarray, xs, ys):
    """Vectorised partial derivatives of the bilinear interpolant.

    Uses the cell whose lower corner is ``floor(x)`` (clamped so the cell stays
    inside the raster), i.e. the right-hand derivative on grid lines.  Returns
    ``(d_dx, d_dy, ok)``; ``ok`` mirrors the validity rule of the sampler.
    """
    h, w = values.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    ok = np.isfinite(xs) & np.isfinite(ys)
    ok &= (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    xc = np.where(ok, xs, 0.0)
    yc = np.where(ok, ys, 0.0)
    x0 = np.clip(np.floor(xc).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.intp), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0

    v00 = values[y0, x0]
    v01 = values[y0, x1]
    v10 = values[y1, x0]
    v11 = values[y1, x1]
    ok &= valid[y0, x0] & valid[y0, x1] & valid[y1, x0] & valid[y1, x1]

    d_dx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
    d_dy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01)
    if w == 1:
        d_dx = np.zeros_like(d_dx)
    if h == 1:
        d_dy = np.zeros_like(d_dy)
    return d_dx, d_dy, ok


def bilinear_sample(m: ScalarMap, p: PixelPoint) -> tuple[float, bool]:
    value, ok = sample_arrays(m.values, m.valid, p[0], p[1])
    return float(value), bool(ok)


def bilinear_sample_grad(m: ScalarMap, p: PixelPoint) -> tuple[float, float]:
    """Gradient of :func:`bilinear_sample` with respect to the point.

    Raises OutOfInteriorError when ``p`` is within half a pixel of the border.
    """
    x, y = float(p[0]), float(p[1])
    if not (0.5 <= x <= m.width - 1.5 and 0.5 <= y <= m.height - 1.5):
        raise OutOfInteriorError(f"point ({x}, {y}) is within half a pixel of the border")
    d_dx, d_dy, ok = sample_grad_arrays(m.values, m.valid, x, y)
    if not ok:
        raise OutOfInteriorError(f"point ({x}, {y}) touches an invalid pixel")
    return float(d_dx), float(d_dy)


def forward_warp_left_to_right(d_left: ScalarMap) -> ScalarMap:
    """Splat left-view disparity into the right view.

    Each valid pixel lands on the nearest column ``x - d``; collisions keep
    the larger disparity (the nearer surface).  Untouched pixels are invalid.
    """
    h, w = d_left.shape
    ys, xs = np.nonzero(d_left.valid)
    d = d_left.values[ys, xs]
    xt = np.floor(xs - d + 0.5).astype(np.intp)
    keep = (xt >= 0) & (xt < w)
    ys, xt, d = ys[keep], xt[keep], d[keep]

    out = np.full(h * w, -np.inf)
    np.maximum.at(out, ys * w + xt, d)
    out = out.reshape(h, w)
    valid = np.isfinite(out)
    return ScalarMap(np.where(valid, out, np.nan), valid)
