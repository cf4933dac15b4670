"""Loss terms and evaluation metrics.

All reductions run over jointly valid pixels only, so whatever is stored in
invalid pixels never affects a result.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyDomainError
from .fileio import CalibrationFile
from .flow import OfdResult
from .grid import ScalarMap, check_same_shape
from .occlusion import OcclusionMask

DICE_EPS = 1e-6
BCE_EPS = 1e-7
BAD_THRESHOLD = 3.0

# weights of the composite objective: two L1 terms, flow, dice, weighted BCE
W_L1_REFINED = 1.0
W_L1_INVDEPTH = 1.0
W_OFD = 0.5
W_DICE = 0.25
W_WBCE = 0.25

CSV_FIELDS = ("frame_id", "epe_px", "bad3_percent", "rmse_mm", "valid_pixels", "excluded_nonpositive")


@dataclass(frozen=True)
class MetricReport:
    epe_px: float
    bad3_percent: float
    rmse_mm: float
    valid_pixels: int
    excluded_nonpositive: int

    def as_dict(self) -> dict:
        return asdict(self)

    def csv_row(self, frame_id) -> list:
        return [frame_id, repr(self.epe_px), repr(self.bad3_percent), repr(self.rmse_mm),
                self.valid_pixels, self.excluded_nonpositive]


@dataclass(frozen=True)
class CompositeLossReport:
    l1_refined: float
    l1_invdepth: float
    ofd: float
    dice: float
    wbce: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def _joint(a, b) -> np.ndarray:
    check_same_shape(a, b)
    return a.valid & b.valid


def l1_loss(pred: ScalarMap, gt: ScalarMap) -> float:
    """Mean absolute error over jointly valid pixels (0 when there are none)."""
    ok = _joint(pred, gt)
    n = int(ok.sum())
    if n == 0:
        return 0.0
    return float(np.sum(np.abs(pred.values[ok] - gt.values[ok]))) / n


# end-point error is defined as the mean absolute disparity error
epe = l1_loss


def bad3(pred: ScalarMap, gt: ScalarMap, threshold: float = BAD_THRESHOLD) -> float:
    """Percentage of jointly valid pixels whose error is strictly above ``threshold``."""
    ok = _joint(pred, gt)
    n = int(ok.sum())
    if n == 0:
        raise EmptyDomainError("bad3: no jointly valid pixels")
    bad = int(np.count_nonzero(np.abs(pred.values[ok] - gt.values[ok]) > threshold))
    return 100.0 * bad / n


def dice_loss(M: OcclusionMask, M_ref: OcclusionMask, eps: float = DICE_EPS) -> float:
    ok = _joint(M, M_ref)
    m, r = M.m[ok], M_ref.m[ok]
    inter = float(np.sum(m * r))
    return 1.0 - (2.0 * inter + eps) / (float(np.sum(m)) + float(np.sum(r)) + eps)


def weighted_bce(M: OcclusionMask, M_ref: OcclusionMask, eps: float = BCE_EPS) -> float:
    """Class-balanced binary cross-entropy.

    Positive and negative terms are weighted by ``N/(2*N_pos)`` and
    ``N/(2*N_neg)`` where the class sizes are the (soft) sums of ``M_ref``
    and ``1 - M_ref``; an empty class gets weight 0.
    """
    ok = _joint(M, M_ref)
    n = int(ok.sum())
    if n == 0:
        return 0.0
    m = np.clip(M.m[ok], eps, 1.0 - eps)
    r = M_ref.m[ok]
    n_pos = float(np.sum(r))
    n_neg = float(np.sum(1.0 - r))
    w_pos = n / (2.0 * n_pos) if n_pos > 0 else 0.0
    w_neg = n / (2.0 * n_neg) if n_neg > 0 else 0.0
    terms = w_pos * r * np.log(m) + w_neg * (1.0 - r) * np.log1p(-m)
    return -float(np.sum(terms)) / n


def composite_loss(
    S_hat: ScalarMap,
    D_inv_hat: ScalarMap,
    S_gt: ScalarMap,
    M: OcclusionMask,
    M_lrc: OcclusionMask,
    ofd: OfdResult | float,
) -> CompositeLossReport:
    l1_refined = l1_loss(S_hat, S_gt)
    l1_invdepth = l1_loss(D_inv_hat, S_gt)
    ofd_value = float(ofd.loss if isinstance(ofd, OfdResult) else ofd)
    dice = dice_loss(M, M_lrc)
    wbce = weighted_bce(M, M_lrc)
    total = (
        W_L1_REFINED * l1_refined
        + W_L1_INVDEPTH * l1_invdepth
        + W_OFD * ofd_value
        + W_DICE * dice
        + W_WBCE * wbce
    )
    return CompositeLossReport(l1_refined, l1_invdepth, ofd_value, dice, wbce, total)


def disparity_to_depth(d: ScalarMap, calib: CalibrationFile) -> tuple[ScalarMap, int]:
    """Pinhole depth ``focal_px * baseline_mm / d`` in millimetres.

    Returns the depth map and the number of valid input pixels rejected for
    having disparity at or below ``calib.min_valid_disparity_px``.
    """
    with np.errstate(invalid="ignore"):
        usable = d.valid & (d.values > calib.min_valid_disparity_px) & (d.values > 0)
    excluded = int(np.count_nonzero(d.valid & ~usable))
    safe = np.where(usable, d.values, 1.0)
    z = calib.focal_px * calib.baseline_mm / safe
    return ScalarMap(np.where(usable, z, np.nan), usable), excluded


def rmse_depth(pred: ScalarMap, gt: ScalarMap, calib: CalibrationFile) -> float:
    check_same_shape(pred, gt)
    zp, _ = disparity_to_depth(pred, calib)
    zg, _ = disparity_to_depth(gt, calib)
    ok = zp.valid & zg.valid
    n = int(ok.sum())
    if n == 0:
        raise EmptyDomainError("rmse_depth: no jointly valid pixels after depth conversion")
    diff = zp.values[ok] - zg.values[ok]
    return math.sqrt(float(np.sum(diff * diff)) / n)


def evaluate(pred: ScalarMap, gt: ScalarMap, calib: CalibrationFile) -> MetricReport:
    ok = _joint(pred, gt)
    n = int(ok.sum())
    if n == 0:
        raise EmptyDomainError("evaluate: prediction and ground truth share no valid pixels")
    zp, _ = disparity_to_depth(pred, calib)
    zg, _ = disparity_to_depth(gt, calib)
    excluded = int(np.count_nonzero(ok & ~(zp.valid & zg.valid)))
    return MetricReport(
        epe_px=epe(pred, gt),
        bad3_percent=bad3(pred, gt),
        rmse_mm=rmse_depth(pred, gt, calib),
        valid_pixels=n,
        excluded_nonpositive=excluded,
    )


def summarize(reports: list[MetricReport]) -> MetricReport:
    """Frame-wise means (exactly rounded, so independent of frame order)."""
    if not reports:
        raise EmptyDomainError("no frames to summarize")
    k = len(reports)
    return MetricReport(
        epe_px=math.fsum(r.epe_px for r in reports) / k,
        bad3_percent=math.fsum(r.bad3_percent for r in reports) / k,
        rmse_mm=math.fsum(r.rmse_mm for r in reports) / k,
        valid_pixels=sum(r.valid_pixels for r in reports),
        excluded_nonpositive=sum(r.excluded_nonpositive for r in reports),
    )
