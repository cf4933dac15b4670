"""Affine alignment of monocular inverse depth to disparity, and mask-weighted
fusion of the aligned map with the coarse disparity.

Disparity is affine in inverse depth for a rectified pinhole pair, so the
scale/shift maps are estimated by trimmed least squares over pixels the
occlusion mask trusts, either once for the whole frame or per tile with the
tile-centre values blended bilinearly into dense maps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFitError
from .grid import ScalarMap, check_same_shape, sample_arrays
from .occlusion import OcclusionMask

DEFAULT_TRIM = 0.1
DEFAULT_ROUNDS = 2
CONFIDENCE_THRESHOLD = 0.5


@dataclass(frozen=True)
class AffineFit:
    k: float
    b: float
    inlier_count: int
    rms_residual: float

    def as_dict(self) -> dict:
        return {"k": self.k, "b": self.b, "inlier_count": self.inlier_count, "rms_residual": self.rms_residual}


def _solve(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    n = x.size
    if n < 2:
        raise DegenerateFitError(f"degenerate fit: {n} usable pixel(s), need at least 2")
    xm = x.mean()
    ym = y.mean()
    dx = x - xm
    sxx = float(dx @ dx)
    scale = float(np.max(np.abs(x)))
    if np.ptp(x) == 0 or sxx <= n * (1e-12 * scale) ** 2:
        raise DegenerateFitError("degenerate fit: inverse depth has zero variance over the fit pixels")
    k = float(dx @ (y - ym)) / sxx
    b = float(ym - k * xm)
    return k, b


def fit_affine_points(x, y, trim_fraction: float = DEFAULT_TRIM, rounds: int = DEFAULT_ROUNDS):
    """Trimmed least-squares fit of ``y ~ k*x + b`` on 1-D samples.

    After the initial fit, each round ranks every sample by absolute residual
    under the current fit, keeps the smallest ``n - floor(trim_fraction*n)``
    and refits.  Returns ``(AffineFit, keep)`` where ``keep`` flags the final
    inlier samples.
    """
    if not 0 <= trim_fraction < 0.5:
        raise ValueError(f"trim_fraction must be in [0, 0.5), got {trim_fraction}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    keep = np.ones(n, dtype=bool)
    k, b = _solve(x, y)
    n_drop = math.floor(trim_fraction * n)
    if n_drop > 0:
        for _ in range(rounds):
            r = np.abs(k * x + b - y)
            order = np.argsort(r, kind="stable")
            keep = np.zeros(n, dtype=bool)
            keep[order[: n - n_drop]] = True
            k, b = _solve(x[keep], y[keep])
    r = k * x[keep] + b - y[keep]
    rms = float(np.sqrt(np.mean(r * r)))
    return AffineFit(k, b, int(keep.sum()), rms), keep


def fit_pixels(d_inv: ScalarMap, disp: ScalarMap, confidence: OcclusionMask) -> np.ndarray:
    """Pixels usable for fitting: valid everywhere and not occluded."""
    check_same_shape(d_inv, disp, confidence)
    return d_inv.valid & disp.valid & confidence.valid & (confidence.m < CONFIDENCE_THRESHOLD)


def fit_affine_global(
    d_inv: ScalarMap,
    disp: ScalarMap,
    confidence: OcclusionMask,
    trim_fraction: float = DEFAULT_TRIM,
    rounds: int = DEFAULT_ROUNDS,
) -> AffineFit:
    sel = fit_pixels(d_inv, disp, confidence)
    fit, _ = fit_affine_points(d_inv.values[sel], disp.values[sel], trim_fraction, rounds)
    return fit


@dataclass
class TiledFit:
    """Per-tile fits on a ``tiles_y x tiles_x`` grid.

    ``fits[j][i]`` is the fit for tile row j, column i; ``fallback[j][i]`` is
    True when that tile was degenerate and inherited the global fit.
    """

    fits: list
    fallback: list
    x_edges: list
    y_edges: list
    global_fit: AffineFit | None = None
    shape: tuple = field(default=(0, 0))

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        xe = np.asarray(self.x_edges, dtype=np.float64)
        ye = np.asarray(self.y_edges, dtype=np.float64)
        return (xe[:-1] + xe[1:] - 1) / 2, (ye[:-1] + ye[1:] - 1) / 2

    def grids(self) -> tuple[np.ndarray, np.ndarray]:
        k = np.array([[f.k for f in row] for row in self.fits])
        b = np.array([[f.b for f in row] for row in self.fits])
        return k, b

    def as_dict(self) -> dict:
        tiles = []
        for j, row in enumerate(self.fits):
            for i, fit in enumerate(row):
                tiles.append({
                    "tile": [i, j],
                    "x_range": [self.x_edges[i], self.x_edges[i + 1]],
                    "y_range": [self.y_edges[j], self.y_edges[j + 1]],
                    "fallback": self.fallback[j][i],
                    **fit.as_dict(),
                })
        return {
            "tiles_x": len(self.x_edges) - 1,
            "tiles_y": len(self.y_edges) - 1,
            "global": None if self.global_fit is None else self.global_fit.as_dict(),
            "tiles": tiles,
        }


def _edges(n: int, parts: int) -> list[int]:
    return [(i * n) // parts for i in range(parts + 1)]


def tile_fits(
    d_inv: ScalarMap,
    disp: ScalarMap,
    confidence: OcclusionMask,
    tiles_x: int,
    tiles_y: int,
    trim_fraction: float = DEFAULT_TRIM,
    rounds: int = DEFAULT_ROUNDS,
) -> TiledFit:
    if tiles_x < 1 or tiles_y < 1:
        raise ValueError(f"tile counts must be >= 1, got {tiles_x}x{tiles_y}")
    sel = fit_pixels(d_inv, disp, confidence)
    h, w = sel.shape
    if tiles_x > w or tiles_y > h:
        raise ValueError(f"{tiles_x}x{tiles_y} tiles do not fit a {w}x{h} map")
    xe, ye = _edges(w, tiles_x), _edges(h, tiles_y)

    global_fit = None
    global_err = None

    def global_fallback():
        nonlocal global_fit, global_err
        if global_fit is None and global_err is None:
            try:
                global_fit = fit_affine_global(d_inv, disp, confidence, trim_fraction, rounds)
            except DegenerateFitError as exc:
                global_err = exc
        if global_err is not None:
            raise DegenerateFitError(f"tile fit degenerate and global fallback failed: {global_err}")
        return global_fit

    fits, fallback = [], []
    for j in range(tiles_y):
        row_fits, row_fb = [], []
        for i in range(tiles_x):
            ts = sel[ye[j]:ye[j + 1], xe[i]:xe[i + 1]]
            tx = d_inv.values[ye[j]:ye[j + 1], xe[i]:xe[i + 1]][ts]
            ty = disp.values[ye[j]:ye[j + 1], xe[i]:xe[i + 1]][ts]
            try:
                fit, _ = fit_affine_points(tx, ty, trim_fraction, rounds)
                row_fb.append(False)
            except DegenerateFitError:
                fit = global_fallback()
                row_fb.append(True)
            row_fits.append(fit)
        fits.append(row_fits)
        fallback.append(row_fb)
    if tiles_x == tiles_y == 1 and global_fit is None:
        global_fit = fits[0][0]
    return TiledFit(fits, fallback, xe, ye, global_fit, (h, w))


def interpolate_tiles(tiled: TiledFit) -> tuple[ScalarMap, ScalarMap]:
    """Dense K and B maps by bilinear blending of tile-centre values; pixels
    beyond the outermost centres take the nearest edge value."""
    h, w = tiled.shape
    cx, cy = tiled.centers()
    kg, bg = tiled.grids()
    u = np.interp(np.arange(w, dtype=np.float64), cx, np.arange(cx.size, dtype=np.float64))
    v = np.interp(np.arange(h, dtype=np.float64), cy, np.arange(cy.size, dtype=np.float64))
    uu, vv = np.meshgrid(u, v)
    ones = np.ones(kg.shape, dtype=bool)
    kmap, _ = sample_arrays(kg, ones, uu, vv)
    bmap, _ = sample_arrays(bg, ones, uu, vv)
    return ScalarMap.from_array(kmap), ScalarMap.from_array(bmap)


def fit_affine_tiled(
    d_inv: ScalarMap,
    disp: ScalarMap,
    confidence: OcclusionMask,
    tiles_x: int,
    tiles_y: int,
    trim_fraction: float = DEFAULT_TRIM,
    rounds: int = DEFAULT_ROUNDS,
) -> tuple[ScalarMap, ScalarMap]:
    return interpolate_tiles(tile_fits(d_inv, disp, confidence, tiles_x, tiles_y, trim_fraction, rounds))


def refine_inverse_depth(d_inv: ScalarMap, K: ScalarMap, B: ScalarMap) -> ScalarMap:
    """Per-pixel ``K * d_inv + B``."""
    check_same_shape(d_inv, K, B)
    return ScalarMap(K.values * d_inv.values + B.values, d_inv.valid & K.valid & B.valid)


def fuse(S: ScalarMap, D_inv_hat: ScalarMap, M: OcclusionMask, invert_mask: bool = False) -> ScalarMap:
    """Blend coarse disparity and refined inverse depth under the mask.

    By default the result is ``M*S + (1-M)*D_inv_hat``; with ``invert_mask``
    the roles swap so occluded pixels (M=1) take the depth-derived value.
    """
    check_same_shape(S, D_inv_hat, M)
    valid = S.valid & D_inv_hat.valid & M.valid
    m = M.m
    if np.any(((m < 0) | (m > 1)) & M.valid):
        raise ValueError("mask value outside [0,1]")
    w = 1.0 - m if invert_mask else m
    s, d = S.values, D_inv_hat.values
    with np.errstate(invalid="ignore"):
        out = w * s + (1.0 - w) * d
        out = np.clip(out, np.minimum(s, d), np.maximum(s, d))
    out = np.where(w == 1.0, s, np.where(w == 0.0, d, out))
    return ScalarMap(np.where(valid, out, np.nan), valid)
