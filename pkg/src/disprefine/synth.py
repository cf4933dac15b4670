"""Synthetic two-layer rectified stereo sequences with exact ground truth.

A fronto-parallel background plane sits behind a rectangular foreground
plane that translates in the image by a fixed amount per frame.  Disparity,
right-view disparity, backward flows and the occlusion band all follow in
closed form, so the generator doubles as the oracle for the other stages.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fileio import CalibrationFile, atomic_write_text, write_calibration, write_flo, write_mask_png, write_pfm
from .grid import FlowMap, ScalarMap
from .occlusion import OcclusionMask

K_RANGE = (0.5, 4.0)
B_RANGE = (-5.0, 5.0)

FRAME_FILES = {
    "disparity_gt": "disparity_gt.pfm",
    "disparity_right_gt": "disparity_right_gt.pfm",
    "coarse_disparity": "coarse_left.pfm",
    "coarse_disparity_right": "coarse_right.pfm",
    "inverse_depth": "inverse_depth.pfm",
    "flow_left_bwd": "flow_left_bwd.flo",
    "flow_right_bwd": "flow_right_bwd.flo",
    "occlusion_gt": "occlusion_gt.png",
}


@dataclass(frozen=True)
class SceneSpec:
    width: int = 64
    height: int = 48
    background_disparity: float = 4.0
    foreground_disparity: float = 10.0
    foreground_rect: tuple = (24, 12, 48, 36)
    per_frame_translation: tuple = (1.0, 0.0)
    frames: int = 3
    noise_sigma: float = 0.25
    occlusion_corruption: float = 5.0
    seed: int = 0
    focal_px: float = 800.0
    baseline_mm: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "foreground_rect", tuple(self.foreground_rect))
        object.__setattr__(self, "per_frame_translation", tuple(float(v) for v in self.per_frame_translation))
        self.validate()

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not self.foreground_disparity > self.background_disparity > 0:
            raise ValueError("need foreground_disparity > background_disparity > 0")
        x0, y0, x1, y1 = self.foreground_rect
        if not (0 <= x0 < x1 <= self.width and 0 <= y0 < y1 <= self.height):
            raise ValueError(f"foreground_rect {self.foreground_rect} is not inside the {self.width}x{self.height} image")
        if self.frames < 2:
            raise ValueError("frames must be >= 2")
        if self.noise_sigma < 0 or self.occlusion_corruption < 0:
            raise ValueError("noise_sigma and occlusion_corruption must be non-negative")

    def calibration(self) -> CalibrationFile:
        return CalibrationFile(self.focal_px, self.baseline_mm)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["foreground_rect"] = list(self.foreground_rect)
        d["per_frame_translation"] = list(self.per_frame_translation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass(frozen=True)
class SceneFramePair:
    disparity_gt: ScalarMap
    disparity_right_gt: ScalarMap
    inverse_depth: ScalarMap
    coarse_disparity: ScalarMap
    coarse_disparity_right: ScalarMap
    flow_left_bwd: FlowMap
    flow_right_bwd: FlowMap
    occlusion_gt: OcclusionMask
    calib: CalibrationFile
    foreground_left: np.ndarray = field(repr=False)
    index: int = 0


def hidden_affine(spec: SceneSpec) -> tuple[float, float]:
    """Scale and shift mapping the scene's inverse depth to disparity."""
    rng = np.random.default_rng([spec.seed, 0xAFF1])
    return float(rng.uniform(*K_RANGE)), float(rng.uniform(*B_RANGE))


def _rect_at(spec: SceneSpec, t: int) -> tuple[float, float, float, float]:
    x0, y0, x1, y1 = spec.foreground_rect
    tx, ty = spec.per_frame_translation
    return x0 + t * tx, y0 + t * ty, x1 + t * tx, y1 + t * ty


def _inside(xs, ys, rect) -> np.ndarray:
    x0, y0, x1, y1 = rect
    return (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)


def foreground_masks(spec: SceneSpec, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Foreground membership in the left and right views at frame ``t``."""
    ys, xs = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    rect = _rect_at(spec, t)
    df = spec.foreground_disparity
    left = _inside(xs, ys, rect)
    right = _inside(xs + df, ys, rect)
    return left, right


def occlusion_geometry(spec: SceneSpec, t: int) -> np.ndarray:
    """Left pixels whose right correspondent is off-frame or hidden by the foreground."""
    ys, xs = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    fg_left, _ = foreground_masks(spec, t)
    d = np.where(fg_left, spec.foreground_disparity, spec.background_disparity)
    xr = xs - d
    off_frame = (xr < 0) | (xr > spec.width - 1)
    # a background point is hidden if the foreground covers its right-view column
    covered = ~fg_left & _inside(xr + spec.foreground_disparity, ys, _rect_at(spec, t))
    return off_frame | covered


def generate_scene(spec: SceneSpec) -> list[SceneFramePair]:
    spec.validate()
    k, b = hidden_affine(spec)
    db, df = spec.background_disparity, spec.foreground_disparity
    tx, ty = spec.per_frame_translation
    calib = spec.calibration()
    shape = (spec.height, spec.width)
    frames = []
    for t in range(spec.frames):
        rng = np.random.default_rng([spec.seed, t + 1])
        fg_left, fg_right = foreground_masks(spec, t)
        disp = np.where(fg_left, df, db)
        disp_r = np.where(fg_right, df, db)
        occluded = occlusion_geometry(spec, t)

        coarse = disp + rng.normal(0.0, spec.noise_sigma, shape) if spec.noise_sigma > 0 else disp.copy()
        coarse = coarse + np.where(occluded, spec.occlusion_corruption, 0.0)
        coarse_r = disp_r + rng.normal(0.0, spec.noise_sigma, shape) if spec.noise_sigma > 0 else disp_r.copy()

        fl = FlowMap.from_arrays(np.where(fg_left, -tx, 0.0), np.where(fg_left, -ty, 0.0))
        fr = FlowMap.from_arrays(np.where(fg_right, -tx, 0.0), np.where(fg_right, -ty, 0.0))
        frames.append(SceneFramePair(
            disparity_gt=ScalarMap.from_array(disp),
            disparity_right_gt=ScalarMap.from_array(disp_r),
            inverse_depth=ScalarMap.from_array((disp - b) / k),
            coarse_disparity=ScalarMap.from_array(coarse),
            coarse_disparity_right=ScalarMap.from_array(coarse_r),
            flow_left_bwd=fl,
            flow_right_bwd=fr,
            occlusion_gt=OcclusionMask.from_array(occluded.astype(np.float64)),
            calib=calib,
            foreground_left=fg_left,
            index=t,
        ))
    return frames


def dilate(mask: np.ndarray, radius: int = 1) -> np.ndarray:
    """Chebyshev-distance dilation of a boolean mask."""
    out = mask.copy()
    h, w = mask.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = np.zeros_like(mask)
            shifted[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
                mask[max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
            out |= shifted
    return out


def edges(mask: np.ndarray) -> np.ndarray:
    """Pixels of ``mask`` or its complement that touch the other set."""
    return dilate(mask, 1) & dilate(~mask, 1)


def boundary_band(spec: SceneSpec, t: int, radius: int = 1) -> np.ndarray:
    """Pixels within ``radius`` of any layer or occlusion boundary at frame t
    or t-1, plus the occluded and newly disoccluded pixels themselves."""
    fg_t, fg_r = foreground_masks(spec, t)
    fg_p, _ = foreground_masks(spec, t - 1)
    occ = occlusion_geometry(spec, t)
    h, w = fg_t.shape
    # right-view foreground edges pulled back to the left background pixels that look at them
    shift = int(round(spec.background_disparity))
    fr_edges = edges(fg_r)
    pulled = np.zeros_like(fr_edges)
    if shift < w:
        pulled[:, shift:] = fr_edges[:, : w - shift]
    disoccluded = ~fg_t & fg_p
    bad = occ | disoccluded | edges(fg_t) | edges(fg_p) | edges(occ) | pulled
    return dilate(bad, radius)


def frame_dir(root, t: int) -> Path:
    return Path(root) / f"frame_{t:04d}"


def write_scene(spec: SceneSpec, frames: list[SceneFramePair], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_calibration(spec.calibration(), out / "calib.txt")
    k, b = hidden_affine(spec)
    meta = {"spec": spec.as_dict(), "hidden_affine": {"k": k, "b": b}, "frames": len(frames)}
    atomic_write_text(out / "scene.json", json.dumps(meta, indent=2) + "\n")
    for fr in frames:
        d = frame_dir(out, fr.index)
        write_pfm(fr.disparity_gt, d / FRAME_FILES["disparity_gt"])
        write_pfm(fr.disparity_right_gt, d / FRAME_FILES["disparity_right_gt"])
        write_pfm(fr.coarse_disparity, d / FRAME_FILES["coarse_disparity"])
        write_pfm(fr.coarse_disparity_right, d / FRAME_FILES["coarse_disparity_right"])
        write_pfm(fr.inverse_depth, d / FRAME_FILES["inverse_depth"])
        write_flo(fr.flow_left_bwd, d / FRAME_FILES["flow_left_bwd"])
        write_flo(fr.flow_right_bwd, d / FRAME_FILES["flow_right_bwd"])
        write_mask_png(fr.occlusion_gt, d / FRAME_FILES["occlusion_gt"])
    return out
