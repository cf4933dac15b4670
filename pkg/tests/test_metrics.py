import math

import numpy as np
import pytest

from disprefine.errors import DimensionMismatch, EmptyDomainError
from disprefine.fileio import CalibrationFile
from disprefine.flow import OfdResult
from disprefine.grid import ScalarMap
from disprefine.metrics import (
    bad3,
    composite_loss,
    dice_loss,
    disparity_to_depth,
    epe,
    evaluate,
    l1_loss,
    rmse_depth,
    summarize,
    weighted_bce,
)
from disprefine.occlusion import OcclusionMask

CAL = CalibrationFile(1000.0, 4.0)


def loop_mae(p, g, vp, vg):
    s, n = 0.0, 0
    for a, b, x, y in zip(p.ravel(), g.ravel(), vp.ravel(), vg.ravel()):
        if x and y:
            s += abs(a - b)
            n += 1
    return s / n if n else 0.0


def loop_dice(m, r, eps):
    inter = sm = sr = 0.0
    for a, b in zip(m.ravel(), r.ravel()):
        inter += a * b
        sm += a
        sr += b
    return 1 - (2 * inter + eps) / (sm + sr + eps)


def loop_wbce(m, r, eps):
    n = m.size
    npos = sum(r.ravel())
    nneg = n - npos
    wp = n / (2 * npos) if npos > 0 else 0.0
    wn = n / (2 * nneg) if nneg > 0 else 0.0
    total = 0.0
    for a, b in zip(m.ravel(), r.ravel()):
        a = min(max(a, eps), 1 - eps)
        total += -(wp * b * math.log(a) + wn * (1 - b) * math.log(1 - a))
    return total / n


def random_maps(r, shape=(7, 9)):
    g = r.uniform(1, 40, shape)
    p = g + r.normal(0, 4, shape)
    return ScalarMap(p, r.random(shape) > 0.15), ScalarMap(g, r.random(shape) > 0.15)


def test_l1_and_epe_examples(rng):
    g = ScalarMap.from_array(rng.normal(size=(4, 4)))
    assert l1_loss(g, g) == 0.0
    assert l1_loss(ScalarMap.from_array(g.values + 2), g) == pytest.approx(2.0)
    two = ScalarMap.from_array([[1.0, 3.0]])
    assert epe(two, ScalarMap.from_array([[0.0, 0.0]])) == 2.0


def test_l1_empty_is_zero():
    assert l1_loss(ScalarMap(np.ones((2, 2)), False), ScalarMap.full(2, 2, 0.0)) == 0.0


def test_l1_matches_loop_and_epe_is_l1(rng):
    for _ in range(20):
        p, g = random_maps(rng)
        ref = loop_mae(p.values, g.values, p.valid, g.valid)
        assert abs(l1_loss(p, g) - ref) <= 1e-12 * max(ref, 1)
        assert epe(p, g) == l1_loss(p, g)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        l1_loss(ScalarMap.full(2, 2, 0), ScalarMap.full(3, 2, 0))


def test_bad3_examples():
    gt = ScalarMap.from_array(np.zeros((1, 2)))
    assert bad3(gt, gt) == 0.0
    assert bad3(ScalarMap.from_array([[2.0, 4.0]]), gt) == 50.0
    assert bad3(ScalarMap.from_array([[3.0, -3.0]]), gt) == 0.0


def test_bad3_empty_raises():
    with pytest.raises(EmptyDomainError):
        bad3(ScalarMap(np.zeros((2, 2)), False), ScalarMap.full(2, 2, 0.0))


def test_bad3_monotone_in_threshold(rng):
    p, g = random_maps(rng)
    vals = [bad3(p, g, t) for t in np.linspace(0, 10, 21)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_dice_examples():
    m = OcclusionMask.from_array([[1.0, 1.0, 0.0, 0.0]])
    assert dice_loss(m, m, 1e-6) == pytest.approx(0.0, abs=1e-15)
    other = OcclusionMask.from_array([[0.0, 0.0, 1.0, 1.0]])
    assert dice_loss(m, other, 1e-6) == pytest.approx(1 - 1e-6 / (4 + 1e-6), abs=1e-15)


def test_wbce_examples(rng):
    ref = OcclusionMask.from_array((np.arange(16) % 2).reshape(4, 4).astype(float))
    assert weighted_bce(ref, ref) < 1e-6
    half = OcclusionMask.full(4, 4, 0.5)
    assert weighted_bce(half, ref) == pytest.approx(math.log(2), abs=1e-12)
    unbalanced = OcclusionMask.from_array((rng.random((4, 4)) > 0.8).astype(float))
    assert weighted_bce(half, unbalanced) == pytest.approx(math.log(2), abs=1e-12)


def test_wbce_single_class_weight():
    ref = OcclusionMask.full(2, 2, 0.0)
    pred = OcclusionMask.full(2, 2, 0.25)
    # only negatives: w_neg = N / (2 N) = 0.5
    assert weighted_bce(pred, ref) == pytest.approx(-0.5 * math.log(0.75), abs=1e-14)


def test_mask_losses_match_loops(rng):
    for _ in range(20):
        m = rng.random((6, 6))
        r = rng.random((6, 6)) if rng.random() < 0.5 else (rng.random((6, 6)) > 0.6).astype(float)
        M, R = OcclusionMask.from_array(m), OcclusionMask.from_array(r)
        d = dice_loss(M, R, 1e-6)
        assert abs(d - loop_dice(m, r, 1e-6)) <= 1e-12
        assert 0 <= d < 1
        b = weighted_bce(M, R, 1e-7)
        assert abs(b - loop_wbce(m, r, 1e-7)) <= 1e-10 * max(1, b)
        assert b >= 0


def test_composite_examples(rng):
    s = ScalarMap.from_array(rng.uniform(1, 5, (4, 4)))
    m = OcclusionMask.from_array((rng.random((4, 4)) > 0.5).astype(float))
    perfect = composite_loss(s, s, s, m, m, 0.0)
    assert perfect.total == pytest.approx(0.0, abs=1e-5)
    only_ofd = composite_loss(s, s, s, m, m, OfdResult(2.0, s, s, 1))
    assert only_ofd.ofd == 2.0
    assert only_ofd.total - perfect.total == pytest.approx(1.0, abs=1e-12)


def test_composite_decomposes_exactly(rng):
    p, g = random_maps(rng)
    d, _ = random_maps(rng)
    M = OcclusionMask.from_array(rng.random(p.shape))
    R = OcclusionMask.from_array((rng.random(p.shape) > 0.5).astype(float))
    rep = composite_loss(p, d, g, M, R, 0.8)
    terms = (l1_loss(p, g), l1_loss(d, g), 0.8, dice_loss(M, R), weighted_bce(M, R))
    assert (rep.l1_refined, rep.l1_invdepth, rep.ofd, rep.dice, rep.wbce) == terms
    assert rep.total == 1 * terms[0] + 1 * terms[1] + 0.5 * terms[2] + 0.25 * terms[3] + 0.25 * terms[4]


def test_disparity_to_depth():
    z, excluded = disparity_to_depth(ScalarMap.from_array([[10.0, 0.05, -3.0, 20.0]]), CAL)
    assert z.values[0, 0] == 400.0 and z.values[0, 3] == 200.0
    assert z.valid.tolist() == [[True, False, False, True]] and excluded == 2


def test_disparity_to_depth_matches_loop(rng):
    d = rng.uniform(0.2, 50, (6, 6))
    z, _ = disparity_to_depth(ScalarMap.from_array(d), CAL)
    for y in range(6):
        for x in range(6):
            assert abs(z.values[y, x] - 4000.0 / d[y, x]) <= 1e-12 * z.values[y, x]


def test_rmse_examples():
    gt = ScalarMap.from_array(np.full((3, 3), 10.0))  # 400 mm
    assert rmse_depth(gt, gt, CAL) == 0.0
    pred = ScalarMap.from_array(np.full((3, 3), 4000.0 / 405.0))
    assert rmse_depth(pred, gt, CAL) == pytest.approx(5.0, abs=1e-9)


def test_rmse_empty_raises():
    with pytest.raises(EmptyDomainError):
        rmse_depth(ScalarMap.full(2, 2, -1.0), ScalarMap.full(2, 2, 5.0), CAL)


def test_evaluate_bundle(rng):
    p, g = random_maps(rng)
    rep = evaluate(p, g, CAL)
    assert rep.epe_px == epe(p, g) and rep.bad3_percent == bad3(p, g)
    assert rep.rmse_mm == rmse_depth(p, g, CAL)
    assert rep.valid_pixels == int((p.valid & g.valid).sum())


def test_evaluate_counts_nonpositive():
    p = ScalarMap.from_array([[5.0, -1.0, 0.0]])
    g = ScalarMap.from_array([[5.0, 5.0, 5.0]])
    rep = evaluate(p, g, CAL)
    assert rep.excluded_nonpositive == 2 and rep.valid_pixels == 3 and rep.rmse_mm == 0.0


def test_metrics_ignore_invalid_payloads(rng):
    p, g = random_maps(rng)
    junk = np.where(p.valid, p.values, rng.normal(0, 1e6, p.shape))
    p2 = ScalarMap(junk, p.valid)
    M = OcclusionMask(rng.random(p.shape), p.valid)
    M2 = OcclusionMask(np.where(p.valid, M.m, rng.normal(size=p.shape)), p.valid)
    R = OcclusionMask.from_array((rng.random(p.shape) > 0.5).astype(float))
    assert evaluate(p, g, CAL) == evaluate(p2, g, CAL)
    assert dice_loss(M, R) == dice_loss(M2, R) and weighted_bce(M, R) == weighted_bce(M2, R)


def test_summarize_means():
    a = evaluate(ScalarMap.full(1, 2, 5.0), ScalarMap.full(1, 2, 5.0), CAL)
    b = evaluate(ScalarMap.full(1, 2, 9.0), ScalarMap.full(1, 2, 5.0), CAL)
    s = summarize([a, b])
    assert s.epe_px == 2.0 and s.bad3_percent == 50.0 and s.valid_pixels == 4
