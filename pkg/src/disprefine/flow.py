"""Optical flow difference loss: temporal consistency of a disparity sequence
against left/right backward optical flow.

For a left pixel ``p`` with disparity ``s`` the right correspondent is
``q = (x - s, y)``.  Following both points one frame back with the backward
flows gives the previous stereo pair; the change in their horizontal offset
must equal the change in disparity.  The vertical offset change should be
zero for rectified views and is turned into a per-pixel reliability weight.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import FlowMap, ScalarMap, check_same_shape, sample_arrays, sample_grad_arrays

PENALTIES = ("abs", "square")


@dataclass(frozen=True)
class OfdInputs:
    """Current/previous left disparity and backward (k -> k-1) flows."""

    S_k: ScalarMap
    S_km1: ScalarMap
    B_L: FlowMap
    B_R: FlowMap

    def __post_init__(self):
        check_same_shape(self.S_k, self.S_km1, self.B_L, self.B_R)

    def with_disparity(self, S_k: ScalarMap) -> "OfdInputs":
        return OfdInputs(S_k, self.S_km1, self.B_L, self.B_R)


@dataclass(frozen=True)
class OfdResult:
    loss: float
    residual: ScalarMap
    weight: ScalarMap
    count: int

    def as_dict(self) -> dict:
        return {"loss": self.loss, "count": self.count}


def _terms(inp: OfdInputs):
    """Shared per-pixel quantities: residual, vertical difference, validity
    and the correspondent column used for the right-flow lookup."""
    h, w = inp.S_k.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    s = inp.S_k.values
    bl_x, bl_y = inp.B_L.dx, inp.B_L.dy
    ok = inp.S_k.valid & inp.B_L.valid
    with np.errstate(invalid="ignore"):
        ok &= s > 0
    s = np.where(ok, s, 0.0)
    bl_x = np.where(ok, bl_x, 0.0)
    bl_y = np.where(ok, bl_y, 0.0)

    qx = xs - s
    br_x, ok_rx = sample_arrays(inp.B_R.dx, inp.B_R.valid, qx, ys)
    br_y, ok_ry = sample_arrays(inp.B_R.dy, inp.B_R.valid, qx, ys)
    prev, ok_prev = sample_arrays(inp.S_km1.values, inp.S_km1.valid, xs + bl_x, ys + bl_y)
    ok &= ok_rx & ok_ry & ok_prev

    # (p.x - P_L^{k-1}.x) - (q.x - P_R^{k-1}.x) reduces to B_R.x(q) - B_L.x(p)
    delta_xf = br_x - bl_x
    delta_xp = s - prev
    residual = delta_xf - delta_xp
    dyf = br_y - bl_y
    return residual, dyf, ok, qx, ys


def ofd_residual(inp: OfdInputs) -> tuple[ScalarMap, ScalarMap]:
    """Signed horizontal residual and vertical flow difference per pixel."""
    residual, dyf, ok, _, _ = _terms(inp)
    return ScalarMap(np.where(ok, residual, np.nan), ok), ScalarMap(np.where(ok, dyf, np.nan), ok)


def adaptive_weight(dyF: ScalarMap) -> ScalarMap:
    """``clamp(1 - dyF**2, 0, 1)``."""
    with np.errstate(invalid="ignore", over="ignore"):
        w = np.clip(1.0 - dyF.values ** 2, 0.0, 1.0)
    return ScalarMap(w, dyF.valid)


def _penalty(r: np.ndarray, penalty: str) -> np.ndarray:
    if penalty == "abs":
        return np.abs(r)
    if penalty == "square":
        return r * r
    raise ValueError(f"unknown penalty {penalty!r}; expected one of {PENALTIES}")


def ofd_loss(inp: OfdInputs, penalty: str = "abs") -> OfdResult:
    residual, dyf = ofd_residual(inp)
    weight = adaptive_weight(dyf)
    ok = residual.valid
    count = int(ok.sum())
    if count == 0:
        return OfdResult(0.0, residual, weight, 0)
    terms = weight.values[ok] * _penalty(residual.values[ok], penalty)
    return OfdResult(float(np.sum(terms)) / count, residual, weight, count)


def ofd_loss_grad(inp: OfdInputs, penalty: str = "abs") -> ScalarMap:
    """Analytic d(loss)/d(S_k) per pixel.

    The weight is held fixed (stop-gradient).  ``S_k(p)`` enters pixel p's
    residual directly with slope -1 and through the right-flow lookup at
    ``q = (x - S_k(p), y)``, contributing ``-dB_R.x/dx (q)``.  Pixels that do
    not contribute to the loss have zero gradient.
    """
    residual, dyf, ok, qx, ys = _terms(inp)
    weight = np.clip(1.0 - np.where(ok, dyf, 0.0) ** 2, 0.0, 1.0)
    count = int(ok.sum())
    grad = np.zeros(inp.S_k.shape)
    if count == 0:
        return ScalarMap.from_array(grad)
    gx, _, _ = sample_grad_arrays(inp.B_R.dx, inp.B_R.valid, qx, ys)
    dr_ds = -1.0 - gx
    r = np.where(ok, residual, 0.0)
    if penalty == "square":
        drho = 2.0 * r
    elif penalty == "abs":
        drho = np.sign(r)
    else:
        raise ValueError(f"unknown penalty {penalty!r}; expected one of {PENALTIES}")
    grad = np.where(ok, weight * drho * dr_ds / count, 0.0)
    return ScalarMap.from_array(grad)


def frozen_weight_loss(inp: OfdInputs, weight: ScalarMap, count: int, penalty: str = "abs") -> float:
    """Loss with a fixed weight map and normaliser.  This is the objective
    whose exact derivative :func:`ofd_loss_grad` returns."""
    residual, _ = ofd_residual(inp)
    ok = residual.valid & weight.valid
    if count == 0:
        return 0.0
    return float(np.sum(weight.values[ok] * _penalty(residual.values[ok], penalty))) / count


def finite_difference_check(inp: OfdInputs, penalty: str = "square", h: float = 1e-4,
                            max_pixels: int | None = None) -> dict:
    """Compare the analytic gradient with central differences of the
    frozen-weight loss.

    Only interior contributing pixels are compared: the pixel must stay valid
    under both perturbations and its right-view lookup must not cross a
    bilinear cell edge (where the derivative is undefined).  ``max_pixels``
    caps the work by taking evenly spaced candidates.
    """
    base = ofd_loss(inp, penalty)
    grad = ofd_loss_grad(inp, penalty).values
    residual0, _ = ofd_residual(inp)
    h_, w_ = inp.S_k.shape
    xs = np.arange(w_)[None, :].repeat(h_, axis=0)
    s0 = inp.S_k.values
    qx = xs - s0
    frac = qx - np.floor(qx)
    away_from_kink = (frac > 2 * h) & (frac < 1 - 2 * h)

    max_rel = 0.0
    max_abs = 0.0
    checked = 0
    cand_y, cand_x = np.nonzero(residual0.valid & away_from_kink)
    if max_pixels is not None and cand_y.size > max_pixels:
        pick = np.linspace(0, cand_y.size - 1, max_pixels).round().astype(int)
        cand_y, cand_x = cand_y[pick], cand_x[pick]
    for y, x in zip(cand_y, cand_x):
        losses = []
        still_valid = True
        for sign in (1.0, -1.0):
            vals = s0.copy()
            vals[y, x] += sign * h
            pert = inp.with_disparity(ScalarMap(vals, inp.S_k.valid))
            r, _ = ofd_residual(pert)
            if not np.array_equal(r.valid, residual0.valid):
                still_valid = False
                break
            losses.append(frozen_weight_loss(pert, base.weight, base.count, penalty))
        if not still_valid:
            continue
        fd = (losses[0] - losses[1]) / (2 * h)
        a = grad[y, x]
        err = abs(a - fd)
        max_abs = max(max_abs, err)
        max_rel = max(max_rel, err / max(abs(a), abs(fd), 1e-12))
        checked += 1
    return {"max_rel_error": max_rel, "max_abs_error": max_abs, "checked_pixels": checked, "h": h}
