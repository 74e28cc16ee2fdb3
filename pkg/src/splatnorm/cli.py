"""Command-line interface: render, analyze, fit.

Exit codes: 0 success, 1 runtime failure (bad data, diverged fit), 2 usage
errors (unknown flags, missing files). The default thread count comes from
the SPLATNORM_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from .alphanorm import (
    NormalizationConfig,
    count_map,
    load_count_map_json,
    normalization_exponents,
    per_gaussian_counts,
)
from .core import Camera, DepthMap, InvalidInputError, ParseError, Scene
from .fit import FitConfig, FitDivergedError, fit, write_history_csv
from .io import load_camera, load_png, load_scene, read_pfm, save_png, save_scene, write_pfm
from .loss import LossConfig, psnr
from .rasterizer import RenderOptions, render
from .reg3d import normal_from_depth, render3d, resolve_normals
from .scenegen import GaussianizeOptions, depth_to_gaussians, duplicate_scene, make_plane_views

LUMA = np.array([0.2126, 0.7152, 0.0722])

ANALYZE_COLUMNS = (
    "k", "tau",
    "intensity_raw", "intensity_norm",
    "weight_raw", "weight_norm",
    "contrib_raw", "contrib_norm",
    "psnr_raw", "psnr_norm",
)


class UsageError(Exception):
    pass


def _default_threads() -> int:
    return int(os.environ.get("SPLATNORM_THREADS", "1"))


def _require_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {path}")
    return p


def _parse_pair(spec: str, what: str) -> tuple[str, str]:
    if ":" not in spec:
        raise UsageError(f"{what} must be CAMERA:FILE, got {spec!r}")
    return tuple(spec.split(":", 1))


def _load_depths(pairs: list[str]) -> list[DepthMap]:
    depths = []
    for spec in pairs:
        cam_path, pfm_path = _parse_pair(spec, "--depth")
        cam = load_camera(_require_file(cam_path))
        values = read_pfm(_require_file(pfm_path))
        depths.append(DepthMap(values=values, camera=cam))
    return depths


def _load_image(path: str) -> np.ndarray:
    p = _require_file(path)
    if p.suffix.lower() == ".pfm":
        return read_pfm(p)
    return load_png(p)


def _parse_floats(text: str, what: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x != ""]
    except ValueError:
        raise UsageError(f"{what} must be a comma-separated number list, got {text!r}")


def _parse_ints(text: str, what: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x != ""]
    except ValueError:
        raise UsageError(f"{what} must be a comma-separated integer list, got {text!r}")


def _parse_resolution(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise UsageError(f"--resolution must be WIDTHxHEIGHT, got {text!r}")


# ------------------------------------------------------------------- render

def cmd_render(args) -> int:
    scene = load_scene(_require_file(args.scene))
    camera = load_camera(_require_file(args.camera))
    if args.zoom <= 0:
        raise UsageError("--zoom must be positive")
    if args.zoom != 1.0:
        camera = camera.zoomed(args.zoom)
    if not (args.out or args.out_pfm or args.dump_weights):
        raise UsageError("nothing to do: pass --out, --out-pfm, or --dump-weights")

    options = RenderOptions(threads=args.threads)
    depths = _load_depths(args.depth) if args.depth else None

    if args.normalize:
        if args.branch == "3d":
            raise UsageError("--normalize applies to the 2d branch")
        cfg = NormalizationConfig(m_ref=args.m_ref, tau=args.tau)
        if args.counts:
            maps = [load_count_map_json(_require_file(p)) for p in args.counts]
        elif depths:
            maps = [count_map(depths, i, cfg) for i in range(len(depths))]
        else:
            raise UsageError("--normalize needs --counts files or --depth maps")
        counts = per_gaussian_counts(scene, maps)
        options = options.replace(norm_exponents=normalization_exponents(counts, cfg))

    if args.branch == "3d":
        normal_maps = [normal_from_depth(d) for d in depths] if depths else None
        normals = resolve_normals(scene, normal_maps)
        out = render3d(scene, normals, camera, options)
    else:
        out = render(scene, camera, options)

    if args.out:
        save_png(np.clip(out.color, 0.0, 1.0), args.out)
    if args.out_pfm:
        write_pfm(out.color, args.out_pfm)
    if args.dump_weights:
        write_pfm(out.weight_sum, args.dump_weights)
    return 0


# ------------------------------------------------------------------ analyze

def cmd_analyze(args) -> int:
    ks = _parse_ints(args.views, "--views")
    if not ks or any(k < 1 for k in ks):
        raise UsageError("--views needs positive view counts")
    taus = _parse_floats(args.tau_sweep, "--tau-sweep") if args.tau_sweep else [args.tau]
    h, w = _parse_resolution(args.resolution)

    pv = make_plane_views(
        1, depth=args.depth, tilt_deg=args.tilt, texture=args.texture,
        resolution=(h, w), seed=args.seed,
    )
    camera = pv.cameras[0]
    base = depth_to_gaussians(pv.depths[0], pv.images[0], GaussianizeOptions(opacity=args.opacity))
    options = RenderOptions(threads=args.threads)
    gt = render(base, camera, options).color

    rows = []
    for tau in taus:
        cfg = NormalizationConfig(m_ref=args.m_ref, tau=tau)
        for k in ks:
            dup = duplicate_scene(base, k)
            depths = [pv.depths[0]] * k
            maps = [count_map(depths, i, cfg) for i in range(k)]
            counts = per_gaussian_counts(dup, maps)
            raw = render(dup, camera, options)
            norm = render(
                dup, camera, options.replace(norm_exponents=normalization_exponents(counts, cfg))
            )
            rows.append([
                k, tau,
                float(np.median(raw.color @ LUMA)), float(np.median(norm.color @ LUMA)),
                float(np.median(raw.weight_sum)), float(np.median(norm.weight_sum)),
                float(np.median(raw.contrib_count)), float(np.median(norm.contrib_count)),
                psnr(raw.color, gt), psnr(norm.color, gt),
            ])

    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ANALYZE_COLUMNS)
        for row in rows:
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    return 0


# ---------------------------------------------------------------------- fit

def cmd_fit(args) -> int:
    scene = load_scene(_require_file(args.scene))
    views = []
    for spec in args.view:
        cam_path, img_path = _parse_pair(spec, "--view")
        views.append((load_camera(_require_file(cam_path)), _load_image(img_path)))

    config = FitConfig(
        iterations=args.iterations,
        step_log_scale=args.step_scale,
        step_logit_opacity3d=args.step_opacity3d,
        step_logit_opacity=args.step_opacity,
        step_color=args.step_color,
        loss=LossConfig(lambda_=args.lambda_, beta=args.beta),
        gradient_mode=args.gradient_mode,
        fd_epsilon=args.fd_epsilon,
        seed=args.seed,
        optimizer=args.optimizer,
        probe_zoom=args.probe_zoom,
    )
    options = RenderOptions(threads=args.threads)

    normals = None
    if args.lambda_ > 0:
        normal_maps = None
        if args.depth:
            normal_maps = [normal_from_depth(d) for d in _load_depths(args.depth)]
        normals = resolve_normals(scene, normal_maps)

    try:
        fitted, history = fit(scene, views, normals=normals, config=config, options=options)
    except FitDivergedError as err:
        snapshot = Path(args.out).with_suffix(".diverged.json")
        save_scene(err.scene, snapshot)
        if args.history:
            write_history_csv(err.history, args.history)
        print(f"error: {err}; snapshot written to {snapshot}", file=sys.stderr)
        return 1

    save_scene(fitted, args.out)
    if args.history:
        write_history_csv(history, args.history)
    return 0


# ------------------------------------------------------------------- parser

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatnorm",
        description="Pixel-wise Gaussian splatting renderer with alpha "
                    "normalization and a 3D scale regularizer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a scene from a camera")
    p.add_argument("--scene", required=True, help="scene file (.json or .ply)")
    p.add_argument("--camera", required=True, help="camera file (.json)")
    p.add_argument("--branch", choices=("2d", "3d"), default="2d")
    p.add_argument("--zoom", type=float, default=1.0,
                   help="scale focal lengths, principal point fixed")
    p.add_argument("--normalize", action="store_true",
                   help="apply per-pixel alpha normalization")
    p.add_argument("--m-ref", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--depth", action="append", metavar="CAMERA:PFM",
                   help="per-view depth map, repeatable (counts, normals)")
    p.add_argument("--counts", action="append", metavar="JSON",
                   help="precomputed count map, repeatable")
    p.add_argument("--out", help="PNG output (sRGB)")
    p.add_argument("--out-pfm", help="linear color PFM output")
    p.add_argument("--dump-weights", help="weight_sum PFM output")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("analyze", help="view-count sweep on duplicated plane scenes")
    p.add_argument("--views", default="1,2,4,8", help="comma list of duplicate counts")
    p.add_argument("--tau-sweep", help="comma list of tau values")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--m-ref", type=float, default=1.0)
    p.add_argument("--resolution", default="64x64", help="WIDTHxHEIGHT")
    p.add_argument("--depth", type=float, default=2.0, help="plane depth")
    p.add_argument("--tilt", type=float, default=0.0, help="plane tilt (degrees)")
    p.add_argument("--texture", choices=("checker", "noise"), default="checker")
    p.add_argument("--opacity", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("fit", help="optimize a scene against target views")
    p.add_argument("--scene", required=True)
    p.add_argument("--view", action="append", required=True, metavar="CAMERA:IMAGE",
                   help="target view, repeatable; image is PNG or PFM")
    p.add_argument("--depth", action="append", metavar="CAMERA:PFM",
                   help="per-view depth map for normals, repeatable")
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--lambda", dest="lambda_", type=float, default=0.05)
    p.add_argument("--beta", type=float, default=0.05)
    p.add_argument("--step-scale", type=float, default=0.05)
    p.add_argument("--step-opacity3d", type=float, default=0.05)
    p.add_argument("--step-opacity", type=float, default=0.0)
    p.add_argument("--step-color", type=float, default=0.0)
    p.add_argument("--gradient-mode", choices=("analytic", "fd"), default="analytic")
    p.add_argument("--optimizer", choices=("gd", "adam"), default="gd")
    p.add_argument("--fd-epsilon", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probe-zoom", type=float, default=1.0)
    p.add_argument("--out", required=True, help="fitted scene path")
    p.add_argument("--history", help="per-iteration metrics CSV path")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_fit)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (InvalidInputError, ParseError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
