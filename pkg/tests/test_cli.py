import csv
import json
import logging
import math

import numpy as np
import pytest

from disprefine.cli import main
from disprefine.fileio import read_mask_png, read_pfm, write_calibration, write_flo, write_pfm, CalibrationFile
from disprefine.grid import FlowMap, ScalarMap
from disprefine.synth import FRAME_FILES, SceneSpec, boundary_band, frame_dir


@pytest.fixture
def scene(tmp_path):
    root = tmp_path / "scene"
    assert main(["synth", "--out-dir", str(root)]) == 0
    return root


def f(root, t, key):
    return str(frame_dir(root, t) / FRAME_FILES[key])


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_lrc_consistent_pair_gives_empty_mask(tmp_path):
    d = ScalarMap.from_array(np.zeros((6, 9)))
    write_pfm(d, tmp_path / "l.pfm")
    write_pfm(d, tmp_path / "r.pfm")
    assert main(["lrc", "--left", str(tmp_path / "l.pfm"), "--right", str(tmp_path / "r.pfm"),
                 "--out-dir", str(tmp_path / "o")]) == 0
    assert not read_mask_png(tmp_path / "o" / "mask_lrc.png").m.any()
    assert not read_pfm(tmp_path / "o" / "mask_lrc.pfm").values.any()


def test_lrc_missing_right_falls_back(tmp_path, caplog):
    write_pfm(ScalarMap.from_array(np.full((3, 10), 5.0)), tmp_path / "l.pfm")
    with caplog.at_level(logging.WARNING, logger="disprefine"):
        code = main(["lrc", "--left", str(tmp_path / "l.pfm"), "--right", str(tmp_path / "missing.pfm"),
                     "--out-dir", str(tmp_path / "o")])
    assert code == 0 and "falling back" in caplog.text
    m = read_mask_png(tmp_path / "o" / "mask_lrc.png").m
    assert np.all(m[:, :5] == 1) and np.all(m[:, 5:] == 0)


def test_lrc_on_synth_scene_matches_geometry(scene, tmp_path):
    assert main(["lrc", "--left", f(scene, 0, "disparity_gt"), "--right", f(scene, 0, "disparity_right_gt"),
                 "--out-dir", str(tmp_path / "o")]) == 0
    m = read_mask_png(tmp_path / "o" / "mask_lrc.png").m
    gt = read_mask_png(f(scene, 0, "occlusion_gt")).m
    away = ~boundary_band(SceneSpec(), 0) | (gt == 1)
    assert np.array_equal(m[away], gt[away])


def test_lrc_bad_input_exit_2(tmp_path, capsys):
    (tmp_path / "l.pfm").write_bytes(b"PF\n1 1\n-1\n" + bytes(12))
    assert main(["lrc", "--left", str(tmp_path / "l.pfm"), "--out-dir", str(tmp_path / "o")]) == 2
    assert "unsupported channel count" in capsys.readouterr().err


def test_refine_invert_mask_improves_band(scene, tmp_path):
    out = tmp_path / "r"
    assert main(["refine", "--disparity", f(scene, 0, "coarse_disparity"), "--inverse-depth", f(scene, 0, "inverse_depth"),
                 "--right", f(scene, 0, "coarse_disparity_right"), "--invert-mask", "--out-dir", str(out)]) == 0
    refined = read_pfm(out / "refined.pfm").values
    coarse = read_pfm(f(scene, 0, "coarse_disparity")).values
    gt = read_pfm(f(scene, 0, "disparity_gt")).values
    band = read_mask_png(f(scene, 0, "occlusion_gt")).m == 1
    assert np.mean(np.abs(refined - gt)[band]) < np.mean(np.abs(coarse - gt)[band])
    side = json.loads((out / "fit.json").read_text())
    assert side["flags"]["invert_mask"] is True and side["flags"]["mask_source"] == "left-right"
    assert side["fits"]["tiles"][0]["inlier_count"] > 0


def test_refine_unit_mask_returns_coarse(scene, tmp_path):
    shape = read_pfm(f(scene, 0, "coarse_disparity")).shape
    write_pfm(ScalarMap.from_array(np.ones(shape)), tmp_path / "ones.pfm")
    assert main(["refine", "--disparity", f(scene, 0, "coarse_disparity"), "--inverse-depth", f(scene, 0, "inverse_depth"),
                 "--mask", str(tmp_path / "ones.pfm"), "--out-dir", str(tmp_path / "r")]) == 0
    a = (tmp_path / "r" / "refined.pfm").read_bytes()
    b = open(f(scene, 0, "coarse_disparity"), "rb").read()
    assert a == b


def test_refine_single_tile_equals_global(scene, tmp_path):
    common = ["refine", "--disparity", f(scene, 1, "coarse_disparity"), "--inverse-depth", f(scene, 1, "inverse_depth"),
              "--right", f(scene, 1, "coarse_disparity_right")]
    assert main(common + ["--tiles", "1", "1", "--out-dir", str(tmp_path / "a")]) == 0
    assert main(common + ["--global", "--out-dir", str(tmp_path / "b")]) == 0
    for name in ("refined.pfm", "refined_inverse_depth.pfm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_refine_degenerate_exit_3(tmp_path, capsys):
    c = ScalarMap.from_array(np.full((4, 6), 3.0))
    write_pfm(c, tmp_path / "d.pfm")
    write_pfm(c, tmp_path / "i.pfm")
    code = main(["refine", "--disparity", str(tmp_path / "d.pfm"), "--inverse-depth", str(tmp_path / "i.pfm"),
                 "--global", "--out-dir", str(tmp_path / "o")])
    assert code == 3 and "degenerate fit" in capsys.readouterr().err


def test_ofd_static_frames(scene, tmp_path):
    (tmp_path / "s").mkdir()
    shape = read_pfm(f(scene, 0, "disparity_gt")).shape
    write_flo(FlowMap.zeros(*shape), tmp_path / "s" / "z.flo")
    out = tmp_path / "o"
    assert main(["ofd", "--disp-k", f(scene, 0, "disparity_gt"), "--disp-km1", f(scene, 0, "disparity_gt"),
                 "--flow-left", str(tmp_path / "s" / "z.flo"), "--flow-right", str(tmp_path / "s" / "z.flo"),
                 "--out-dir", str(out)]) == 0
    rep = json.loads((out / "ofd.json").read_text())
    assert rep["loss"] == 0.0 and rep["count"] > 0
    assert read_pfm(out / "ofd_weight.pfm").shape == shape


def test_ofd_grad_check(scene, tmp_path):
    out = tmp_path / "o"
    assert main(["ofd", "--disp-k", f(scene, 1, "coarse_disparity"), "--disp-km1", f(scene, 0, "coarse_disparity"),
                 "--flow-left", f(scene, 1, "flow_left_bwd"), "--flow-right", f(scene, 1, "flow_right_bwd"),
                 "--grad-check", "--out-dir", str(out)]) == 0
    rep = json.loads((out / "ofd.json").read_text())
    assert rep["grad_check"]["checked_pixels"] > 0 and rep["grad_check"]["max_rel_error"] < 1e-4


def test_ofd_dimension_mismatch_exit_2(tmp_path, capsys):
    write_pfm(ScalarMap.full(4, 4, 1.0), tmp_path / "a.pfm")
    write_flo(FlowMap.zeros(4, 5), tmp_path / "f.flo")
    code = main(["ofd", "--disp-k", str(tmp_path / "a.pfm"), "--disp-km1", str(tmp_path / "a.pfm"),
                 "--flow-left", str(tmp_path / "f.flo"), "--flow-right", str(tmp_path / "f.flo"),
                 "--out-dir", str(tmp_path / "o")])
    assert code == 2 and "dimensions differ" in capsys.readouterr().err


def test_eval_perfect_prediction(scene, tmp_path):
    out = tmp_path / "m.csv"
    assert main(["eval", "--pred", f(scene, 0, "disparity_gt"), "--gt", f(scene, 0, "disparity_gt"),
                 "--calib", str(scene / "calib.txt"), "--out", str(out)]) == 0
    rows = read_csv(out)
    assert [float(rows[0][k]) for k in ("epe_px", "bad3_percent", "rmse_mm")] == [0.0, 0.0, 0.0]
    assert rows[-1]["frame_id"] == "mean"


def test_eval_batch_means(scene, tmp_path):
    out = tmp_path / "m.csv"
    args = ["eval", "--calib", str(scene / "calib.txt"), "--out", str(out)]
    for t in range(3):
        args += ["--pred", f(scene, t, "coarse_disparity"), "--gt", f(scene, t, "disparity_gt")]
    assert main(args) == 0
    rows = read_csv(out)
    assert len(rows) == 4
    # recompute each frame's EPE directly and compare the means
    epes = []
    for t in range(3):
        p, g = read_pfm(f(scene, t, "coarse_disparity")).values, read_pfm(f(scene, t, "disparity_gt")).values
        epes.append(float(np.mean(np.abs(p - g))))
        assert float(rows[t]["epe_px"]) == pytest.approx(epes[-1], rel=1e-12)
    assert float(rows[3]["epe_px"]) == pytest.approx(math.fsum(epes) / 3, rel=1e-12)
    for key in ("bad3_percent", "rmse_mm"):
        assert float(rows[3][key]) == pytest.approx(math.fsum(float(r[key]) for r in rows[:3]) / 3, rel=1e-12)


def test_eval_no_overlap_exit_4(tmp_path):
    write_pfm(ScalarMap(np.ones((2, 2)), [[True, True], [False, False]]), tmp_path / "p.pfm")
    write_pfm(ScalarMap(np.ones((2, 2)), [[False, False], [True, True]]), tmp_path / "g.pfm")
    write_calibration(CalibrationFile(100, 1), tmp_path / "c.txt")
    assert main(["eval", "--pred", str(tmp_path / "p.pfm"), "--gt", str(tmp_path / "g.pfm"),
                 "--calib", str(tmp_path / "c.txt")]) == 4


def test_eval_bad_calibration_exit_2(scene, tmp_path):
    (tmp_path / "c.txt").write_text("baseline_mm = 3\n")
    assert main(["eval", "--pred", f(scene, 0, "disparity_gt"), "--gt", f(scene, 0, "disparity_gt"),
                 "--calib", str(tmp_path / "c.txt")]) == 2


def test_eval_composite_json(scene, tmp_path):
    out = tmp_path / "m.csv"
    assert main(["eval", "--pred", f(scene, 0, "disparity_gt"), "--gt", f(scene, 0, "disparity_gt"),
                 "--calib", str(scene / "calib.txt"), "--out", str(out),
                 "--mask", f(scene, 0, "occlusion_gt"), "--mask-ref", f(scene, 0, "occlusion_gt"),
                 "--refined-inverse-depth", f(scene, 0, "disparity_gt")]) == 0
    comp = json.loads((tmp_path / "m.composite.json").read_text())
    assert comp["total"] == pytest.approx(0.0, abs=1e-5)


def test_pe_dump(tmp_path):
    out = tmp_path / "pe"
    assert main(["pe", "--width", "4", "--height", "4", "--n-freq", "1", "--out-dir", str(out)]) == 0
    files = sorted(out.glob("*.pfm"))
    assert len(files) == 4
    assert [read_pfm(p).values[0, 0] for p in files] == [0.0, 1.0, 0.0, 1.0]


def test_errmap_identical_lists(scene, tmp_path):
    out = tmp_path / "e"
    args = ["errmap", "--out-dir", str(out)]
    for t in range(2):
        args += ["--pred", f(scene, t, "disparity_gt"), "--gt", f(scene, t, "disparity_gt")]
    assert main(args) == 0
    assert not read_pfm(out / "error_heatmap.pfm").values.any()
    assert (out / "error_heatmap.png").exists()


def test_synth_rejects_bad_spec(tmp_path):
    assert main(["synth", "--foreground-disparity", "1", "--out-dir", str(tmp_path / "s")]) == 2


def test_pipeline_ingest(scene, tmp_path):
    out = tmp_path / "p"
    assert main(["pipeline", "--scene-dir", str(scene), "--invert-mask", "--out-dir", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert len(man["frames"]) == 3 and man["source"]["mode"] == "ingest"
    assert "ofd" in man["frames"][1] and "composite_loss" in man["frames"][2]
    assert all(len(fr["input_sha256"]) == 4 for fr in man["frames"])
    assert read_csv(out / "metrics.csv")[-1]["frame_id"] == "mean"
