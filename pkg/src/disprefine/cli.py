"""``disprefine`` command-line front end.

Exit codes: 0 success, 2 I/O or format error, 3 numerical degeneracy,
4 empty evaluation domain.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .align import DEFAULT_ROUNDS, DEFAULT_TRIM, fit_affine_global, fuse, interpolate_tiles, refine_inverse_depth, tile_fits
from .errors import DegenerateFitError, DimensionMismatch, EmptyDomainError, FormatError
from .fileio import (
    atomic_write_text,
    read_calibration,
    read_flo,
    read_mask_png,
    read_pfm,
    write_gray_png,
    write_mask_png,
    write_pfm,
)
from .flow import PENALTIES, OfdInputs, finite_difference_check, ofd_loss
from .grid import ScalarMap
from .metrics import CSV_FIELDS, composite_loss, evaluate, summarize
from .occlusion import DEFAULT_TAU, OcclusionMask, lrc_mask, lrc_mask_single
from .posembed import DEFAULT_BASE, DEFAULT_N_FREQ, error_heatmap, heatmap_to_gray, position_maps
from .synth import FRAME_FILES, SceneSpec, frame_dir, generate_scene, write_scene

log = logging.getLogger("disprefine")

EXIT_OK = 0
EXIT_IO = 2
EXIT_DEGENERATE = 3
EXIT_EMPTY = 4


class CliError(Exception):
    def __init__(self, message, code=EXIT_IO):
        super().__init__(message)
        self.code = code


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_mask(path) -> OcclusionMask:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        m = read_pfm(path)
        return OcclusionMask(m.values, m.valid)
    return read_mask_png(path)


def _write_mask(mask: OcclusionMask, out_dir: Path, stem: str) -> dict:
    png, pfm = out_dir / f"{stem}.png", out_dir / f"{stem}.pfm"
    write_mask_png(mask, png)
    write_pfm(mask.as_scalar_map(), pfm)
    return {"png": str(png), "pfm": str(pfm)}


# ---------------------------------------------------------------- lrc

def compute_lrc(left: ScalarMap, right_path, tau: float) -> tuple[OcclusionMask, str]:
    if right_path is not None and Path(right_path).exists():
        return lrc_mask(left, read_pfm(right_path), tau), "left-right"
    if right_path is not None:
        log.warning("right disparity %s not found; falling back to forward-warped left view", right_path)
    else:
        log.info("no right disparity given; using forward-warped left view")
    return lrc_mask_single(left, tau), "warp-fallback"


def cmd_lrc(args) -> int:
    left = read_pfm(args.left)
    mask, mode = compute_lrc(left, args.right, args.tau)
    out = Path(args.out_dir)
    files = _write_mask(mask, out, args.name)
    log.info("lrc (%s): %d of %d valid pixels occluded", mode, int(mask.occluded().sum()), int(mask.valid.sum()))
    print(_dump({"mode": mode, "tau": args.tau, "occluded": int(mask.occluded().sum()), **files}), end="")
    return EXIT_OK


# ---------------------------------------------------------------- refine

def run_refine(disp: ScalarMap, d_inv: ScalarMap, mask: OcclusionMask, tiles, use_global: bool,
               trim: float, invert_mask: bool):
    """Fit, refine and fuse.  Returns (refined, refined_inverse_depth, sidecar dict).

    A degenerate fit is tolerated only when the mask gives the depth-derived
    term zero weight on every pixel; the coarse disparity then passes through.
    """
    try:
        return _refine(disp, d_inv, mask, tiles, use_global, trim, invert_mask)
    except DegenerateFitError as exc:
        depth_weight = mask.m if invert_mask else 1.0 - mask.m
        if np.any(depth_weight[mask.valid] != 0):
            raise
        log.warning("%s; mask never selects the depth term, passing coarse disparity through", exc)
        nothing = ScalarMap(np.full(disp.shape, np.nan), False)
        return ScalarMap(disp.values, disp.valid & mask.valid), nothing, {"mode": "skipped", "reason": str(exc)}


def _refine(disp, d_inv, mask, tiles, use_global, trim, invert_mask):
    if use_global:
        fit = fit_affine_global(d_inv, disp, mask, trim)
        K = ScalarMap.full(*disp.shape, fit.k)
        B = ScalarMap.full(*disp.shape, fit.b)
        fits = {"mode": "global", "global": fit.as_dict(), "tiles": [
            {"tile": [0, 0], "x_range": [0, disp.width], "y_range": [0, disp.height], "fallback": False, **fit.as_dict()}
        ]}
    else:
        tiled = tile_fits(d_inv, disp, mask, tiles[0], tiles[1], trim)
        K, B = interpolate_tiles(tiled)
        fits = {"mode": "tiled", **tiled.as_dict()}
    d_hat = refine_inverse_depth(d_inv, K, B)
    refined = fuse(disp, d_hat, mask, invert_mask=invert_mask)
    return refined, d_hat, fits


def cmd_refine(args) -> int:
    disp = read_pfm(args.disparity)
    d_inv = read_pfm(args.inverse_depth)
    if args.mask:
        mask, mask_mode = _read_mask(args.mask), "provided"
    else:
        mask, mask_mode = compute_lrc(disp, args.right, args.tau)
    refined, d_hat, fits = run_refine(disp, d_inv, mask, args.tiles, args.use_global, args.trim, args.invert_mask)
    out = Path(args.out_dir)
    write_pfm(refined, out / "refined.pfm")
    write_pfm(d_hat, out / "refined_inverse_depth.pfm")
    sidecar = {
        "tool_version": __version__,
        "fits": fits,
        "flags": {
            "tau": args.tau, "tiles": list(args.tiles), "global": args.use_global, "trim": args.trim,
            "rounds": DEFAULT_ROUNDS, "invert_mask": args.invert_mask, "mask_source": mask_mode,
        },
        "inputs": {"disparity": str(args.disparity), "inverse_depth": str(args.inverse_depth),
                   "right": None if args.right is None else str(args.right),
                   "mask": None if args.mask is None else str(args.mask)},
        "outputs": {"refined": str(out / "refined.pfm"), "refined_inverse_depth": str(out / "refined_inverse_depth.pfm")},
    }
    if not args.mask:
        sidecar["outputs"]["mask"] = _write_mask(mask, out, "mask_lrc")
    atomic_write_text(out / "fit.json", _dump(sidecar))
    return EXIT_OK


# ---------------------------------------------------------------- ofd

def load_ofd_inputs(disp_k, disp_km1, flow_left, flow_right, forward_flows=False) -> OfdInputs:
    fl, fr = read_flo(flow_left), read_flo(flow_right)
    if forward_flows:
        # small-motion approximation: backward flow ~ -forward flow
        fl, fr = fl.negated(), fr.negated()
    return OfdInputs(read_pfm(disp_k), read_pfm(disp_km1), fl, fr)


def cmd_ofd(args) -> int:
    inp = load_ofd_inputs(args.disp_k, args.disp_km1, args.flow_left, args.flow_right, args.forward_flows)
    res = ofd_loss(inp, args.penalty)
    out = Path(args.out_dir)
    write_pfm(res.residual, out / "ofd_residual.pfm")
    write_pfm(res.weight, out / "ofd_weight.pfm")
    report = {"loss": res.loss, "count": res.count, "penalty": args.penalty, "forward_flows": args.forward_flows}
    if args.grad_check:
        report["grad_check"] = finite_difference_check(inp, "square", max_pixels=args.grad_check_pixels)
    atomic_write_text(out / "ofd.json", _dump(report))
    print(_dump(report), end="")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for frame_id, report in rows:
        w.writerow(report.csv_row(frame_id))
    return buf.getvalue()


def cmd_eval(args) -> int:
    if len(args.pred) != len(args.gt):
        raise CliError(f"--pred given {len(args.pred)} times but --gt {len(args.gt)} times")
    calib = read_calibration(args.calib)
    ids = args.frame_id or [Path(p).stem if len(args.pred) == 1 else str(i) for i, p in enumerate(args.pred)]
    if len(ids) != len(args.pred):
        raise CliError("--frame-id count must match --pred count")
    rows = []
    for fid, p, g in zip(ids, args.pred, args.gt):
        rows.append((fid, evaluate(read_pfm(p), read_pfm(g), calib)))
    rows.append(("mean", summarize([r for _, r in rows])))
    text = _metrics_csv(rows)
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)

    if args.mask and args.mask_ref and args.refined_inverse_depth:
        ofd = 0.0
        if args.ofd_json:
            ofd = float(json.loads(Path(args.ofd_json).read_text())["loss"])
        comp = composite_loss(read_pfm(args.pred[0]), read_pfm(args.refined_inverse_depth), read_pfm(args.gt[0]),
                              _read_mask(args.mask), _read_mask(args.mask_ref), ofd)
        dest = Path(args.composite_out or (Path(args.out).with_suffix(".composite.json") if args.out else "composite.json"))
        atomic_write_text(dest, _dump(comp.as_dict()))
    return EXIT_OK


# ---------------------------------------------------------------- pe / errmap / synth

def cmd_pe(args) -> int:
    pe = position_maps(args.width, args.height, args.n_freq, args.base, args.normalize)
    out = Path(args.out_dir)
    files = []
    for idx, (name, ch) in enumerate(zip(pe.channel_names(), pe.channels)):
        path = out / f"pe_{idx:02d}_{name}.pfm"
        write_pfm(ScalarMap.from_array(ch), path)
        files.append(str(path))
    print(_dump({"channels": files}), end="")
    return EXIT_OK


def cmd_errmap(args) -> int:
    if len(args.pred) != len(args.gt):
        raise CliError(f"--pred given {len(args.pred)} times but --gt {len(args.gt)} times")
    heat = error_heatmap([read_pfm(p) for p in args.pred], [read_pfm(g) for g in args.gt])
    out = Path(args.out_dir)
    write_pfm(heat, out / "error_heatmap.pfm")
    write_gray_png(heatmap_to_gray(heat), out / "error_heatmap.png")
    return EXIT_OK


def _spec_from_args(args) -> SceneSpec:
    return SceneSpec(
        width=args.width, height=args.height,
        background_disparity=args.background_disparity, foreground_disparity=args.foreground_disparity,
        foreground_rect=tuple(args.rect), per_frame_translation=tuple(args.translation),
        frames=args.frames, noise_sigma=args.noise_sigma, occlusion_corruption=args.occlusion_corruption,
        seed=args.seed,
    )


def cmd_synth(args) -> int:
    try:
        spec = _spec_from_args(args)
    except ValueError as exc:
        raise CliError(f"invalid scene: {exc}") from None
    write_scene(spec, generate_scene(spec), args.out_dir)
    return EXIT_OK


# ---------------------------------------------------------------- pipeline

def _pipeline_frame(scene: Path, out: Path, t: int, opts) -> dict:
    fd = frame_dir(scene, t)
    od = frame_dir(out, t)
    disp = read_pfm(fd / FRAME_FILES["coarse_disparity"])
    d_inv = read_pfm(fd / FRAME_FILES["inverse_depth"])
    gt = read_pfm(fd / FRAME_FILES["disparity_gt"])
    right = fd / FRAME_FILES["coarse_disparity_right"]
    mask, mode = compute_lrc(disp, right if right.exists() else None, opts["tau"])
    _write_mask(mask, od, "mask_lrc")
    refined, d_hat, fits = run_refine(disp, d_inv, mask, opts["tiles"], opts["global"], opts["trim"], opts["invert_mask"])
    write_pfm(refined, od / "refined.pfm")
    write_pfm(d_hat, od / "refined_inverse_depth.pfm")
    atomic_write_text(od / "fit.json", _dump(fits))
    record = {"frame": t, "lrc_mode": mode, "fits": fits}
    inputs = [fd / FRAME_FILES[k] for k in ("coarse_disparity", "inverse_depth", "disparity_gt")]
    if right.exists():
        inputs.append(right)
    record["input_sha256"] = {p.name: _sha256(p) for p in inputs}
    return {"record": record, "refined": refined, "d_hat": d_hat, "mask": mask, "gt": gt}


def cmd_pipeline(args) -> int:
    out = Path(args.out_dir)
    if args.scene_dir:
        scene = Path(args.scene_dir)
        meta_path = scene / "scene.json"
        n_frames = json.loads(meta_path.read_text())["frames"] if meta_path.exists() else \
            len(sorted(scene.glob("frame_*")))
        source = {"mode": "ingest", "scene_dir": str(scene)}
    else:
        spec = _spec_from_args(args)
        scene = out / "scene"
        write_scene(spec, generate_scene(spec), scene)
        n_frames = spec.frames
        source = {"mode": "synth", "spec": spec.as_dict()}
    if n_frames < 1:
        raise CliError(f"no frames found in {scene}")
    calib = read_calibration(scene / "calib.txt")
    opts = {"tau": args.tau, "tiles": tuple(args.tiles), "global": args.use_global, "trim": args.trim,
            "invert_mask": args.invert_mask}

    jobs = max(1, args.jobs)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(lambda t: _pipeline_frame(scene, out, t, opts), range(n_frames)))

    def ofd_frame(t):
        fd, fp = frame_dir(scene, t), frame_dir(out, t - 1)
        inp = load_ofd_inputs(frame_dir(out, t) / "refined.pfm", fp / "refined.pfm",
                              fd / FRAME_FILES["flow_left_bwd"], fd / FRAME_FILES["flow_right_bwd"])
        res = ofd_loss(inp, args.penalty)
        od = frame_dir(out, t)
        write_pfm(res.residual, od / "ofd_residual.pfm")
        write_pfm(res.weight, od / "ofd_weight.pfm")
        return res

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        ofds = [None] + list(pool.map(ofd_frame, range(1, n_frames)))

    rows, frames = [], []
    for t, r in enumerate(results):
        metrics = evaluate(r["refined"], r["gt"], calib)
        rows.append((t, metrics))
        rec = r["record"]
        rec["metrics"] = metrics.as_dict()
        occ_path = frame_dir(scene, t) / FRAME_FILES["occlusion_gt"]
        if ofds[t] is not None:
            rec["ofd"] = ofds[t].as_dict()
        if occ_path.exists():
            comp = composite_loss(r["refined"], r["d_hat"], r["gt"], r["mask"], read_mask_png(occ_path),
                                  ofds[t].loss if ofds[t] is not None else 0.0)
            rec["composite_loss"] = comp.as_dict()
        frames.append(rec)
    summary = summarize([m for _, m in rows])
    rows.append(("mean", summary))
    atomic_write_text(out / "metrics.csv", _metrics_csv(rows))
    manifest = {
        "tool_version": __version__,
        "source": source,
        "flags": {**{k: (list(v) if isinstance(v, tuple) else v) for k, v in opts.items()}, "penalty": args.penalty},
        "calibration_sha256": _sha256(scene / "calib.txt"),
        "frames": frames,
        "summary": summary.as_dict(),
        "artifacts": {"metrics_csv": str(out / "metrics.csv")},
    }
    atomic_write_text(out / "manifest.json", _dump(manifest))
    print(_dump({"summary": summary.as_dict(), "manifest": str(out / "manifest.json")}), end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_refine_opts(p):
    p.add_argument("--tau", type=float, default=DEFAULT_TAU, help="LRC threshold in pixels")
    p.add_argument("--tiles", type=int, nargs=2, default=(1, 1), metavar=("TX", "TY"))
    p.add_argument("--global", dest="use_global", action="store_true", help="single global affine fit")
    p.add_argument("--trim", type=float, default=DEFAULT_TRIM, help="fraction of largest residuals dropped per round")
    p.add_argument("--invert-mask", action="store_true",
                   help="take the depth-derived value where the mask is 1 (occluded)")


def _add_scene_opts(p):
    d = SceneSpec()
    p.add_argument("--width", type=int, default=d.width)
    p.add_argument("--height", type=int, default=d.height)
    p.add_argument("--background-disparity", type=float, default=d.background_disparity)
    p.add_argument("--foreground-disparity", type=float, default=d.foreground_disparity)
    p.add_argument("--rect", type=int, nargs=4, default=d.foreground_rect, metavar=("X0", "Y0", "X1", "Y1"))
    p.add_argument("--translation", type=float, nargs=2, default=d.per_frame_translation, metavar=("TX", "TY"))
    p.add_argument("--frames", type=int, default=d.frames)
    p.add_argument("--noise-sigma", type=float, default=d.noise_sigma)
    p.add_argument("--occlusion-corruption", type=float, default=d.occlusion_corruption)
    p.add_argument("--seed", type=int, default=d.seed)


def _positive(value: str) -> float:
    v = float(value)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disprefine", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("lrc", help="occlusion mask from the left-right consistency check")
    p.add_argument("--left", required=True, help="left disparity PFM")
    p.add_argument("--right", help="right disparity PFM (forward-warp fallback when absent)")
    p.add_argument("--tau", type=_positive, default=DEFAULT_TAU)
    p.add_argument("--name", default="mask_lrc", help="output file stem")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_lrc)

    p = sub.add_parser("refine", help="align inverse depth and fuse with the coarse disparity")
    p.add_argument("--disparity", required=True, help="coarse left disparity PFM")
    p.add_argument("--inverse-depth", required=True, help="monocular inverse depth PFM")
    p.add_argument("--right", help="right disparity PFM used for the LRC mask")
    p.add_argument("--mask", help="precomputed occlusion mask (PNG or PFM); skips LRC")
    _add_refine_opts(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("ofd", help="optical flow difference loss between two frames")
    p.add_argument("--disp-k", required=True, help="refined disparity at frame k")
    p.add_argument("--disp-km1", required=True, help="refined disparity at frame k-1")
    p.add_argument("--flow-left", required=True, help="left flow .flo (k -> k-1)")
    p.add_argument("--flow-right", required=True, help="right flow .flo (k -> k-1)")
    p.add_argument("--forward-flows", action="store_true",
                   help="flows are k-1 -> k; negate them (small-motion approximation)")
    p.add_argument("--penalty", choices=PENALTIES, default="abs")
    p.add_argument("--grad-check", action="store_true", help="finite-difference check of the analytic gradient")
    p.add_argument("--grad-check-pixels", type=int, default=512,
                   help="upper bound on pixels compared by --grad-check (evenly spaced)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ofd)

    p = sub.add_parser("eval", help="EPE / Bad3 / depth RMSE per frame as CSV")
    p.add_argument("--pred", action="append", required=True)
    p.add_argument("--gt", action="append", required=True)
    p.add_argument("--frame-id", action="append")
    p.add_argument("--calib", required=True)
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    p.add_argument("--mask", help="predicted occlusion mask for the composite loss")
    p.add_argument("--mask-ref", help="reference occlusion mask for the composite loss")
    p.add_argument("--refined-inverse-depth", help="refined inverse depth PFM for the composite loss")
    p.add_argument("--ofd-json", help="ofd.json whose loss enters the composite loss")
    p.add_argument("--composite-out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pe", help="dump sinusoidal position maps, one PFM per channel")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--n-freq", type=int, default=DEFAULT_N_FREQ)
    p.add_argument("--base", type=float, default=DEFAULT_BASE)
    p.add_argument("--normalize", action="store_true", help="use x/width and y/height")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_pe)

    p = sub.add_parser("errmap", help="per-pixel mean absolute error heatmap")
    p.add_argument("--pred", action="append", required=True)
    p.add_argument("--gt", action="append", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_errmap)

    p = sub.add_parser("synth", help="write a synthetic two-layer stereo sequence")
    _add_scene_opts(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pipeline", help="synth-or-ingest -> lrc -> refine -> ofd -> eval, with a manifest")
    p.add_argument("--scene-dir", help="existing scene directory (as written by `synth`); synthesises one otherwise")
    _add_scene_opts(p)
    _add_refine_opts(p)
    p.add_argument("--penalty", choices=PENALTIES, default="abs")
    p.add_argument("--jobs", type=int, default=1, help="frame-level worker threads")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DegenerateFitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except EmptyDomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (FormatError, DimensionMismatch, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO

if __name__ == "__main__":
    sys.exit(main())
