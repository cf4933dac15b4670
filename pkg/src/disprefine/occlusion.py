"""Left-right consistency occlusion masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import ScalarMap, _freeze, check_same_shape, forward_warp_left_to_right, sample_arrays

DEFAULT_TAU = 1.0


@dataclass(frozen=True)
class OcclusionMask:
    """Per-pixel occlusion weight in [0, 1]; 1 means occluded."""

    m: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError(f"expected a 2-D mask, got shape {m.shape}")
        valid = np.broadcast_to(np.asarray(self.valid, dtype=bool), m.shape).copy()
        valid &= np.isfinite(m)
        object.__setattr__(self, "m", _freeze(m))
        object.__setattr__(self, "valid", _freeze(valid))

    @classmethod
    def from_array(cls, m, valid=None) -> "OcclusionMask":
        m = np.asarray(m, dtype=np.float64)
        if valid is None:
            valid = np.ones(m.shape, dtype=bool)
        return cls(m, valid)

    @classmethod
    def full(cls, height: int, width: int, value: float) -> "OcclusionMask":
        return cls.from_array(np.full((height, width), float(value)))

    @property
    def height(self) -> int:
        return self.m.shape[0]

    @property
    def width(self) -> int:
        return self.m.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.m.shape

    def occluded(self) -> np.ndarray:
        """Boolean map of valid pixels with m >= 0.5."""
        return self.valid & (self.m >= 0.5)

    def as_scalar_map(self) -> ScalarMap:
        return ScalarMap(self.m, self.valid)


def lrc_mask(d_left: ScalarMap, d_right: ScalarMap, tau: float = DEFAULT_TAU) -> OcclusionMask:
    """Flag left pixels whose disparity disagrees with the right view.

    The right map is sampled bilinearly at ``(x - d_left, y)``; a pixel is
    occluded when that lookup fails or differs by more than ``tau``.
    """
    check_same_shape(d_left, d_right)
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    h, w = d_left.shape
    ys, xs = np.mgrid[0:h, 0:w]
    d = np.where(d_left.valid, d_left.values, 0.0)
    looked_up, ok = sample_arrays(d_right.values, d_right.valid, xs - d, ys)
    with np.errstate(invalid="ignore"):
        consistent = ok & (np.abs(d - looked_up) <= tau)
    m = np.where(consistent, 0.0, 1.0)
    return OcclusionMask(m, d_left.valid)


def lrc_mask_single(d_left: ScalarMap, tau: float = DEFAULT_TAU) -> OcclusionMask:
    """LRC check against a right view synthesised by forward warping."""
    return lrc_mask(d_left, forward_warp_left_to_right(d_left), tau)
