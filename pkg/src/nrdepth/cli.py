"""Command-line pipeline: ``synth``, ``motion``, ``refine``, ``eval`` and ``pipeline``.

Exit codes: 0 success, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .camera import Intrinsics
from .config import PipelineConfig
from .errors import BehindCameraError, InputError, NRDepthError, NumericalError
from .evaluate import THRESHOLDS, depth_to_cloud, evaluate_clouds, format_key_values, format_table, read_xyz
from .io import (FrameEntry, Manifest, downsample, ensure_dir, format_intrinsics, parse_key_values,
                 read_image, read_intrinsics_file, read_manifest, read_mask, read_pfm, write_image,
                 write_manifest, write_mask, write_pfm)
from .masks import (FrameTuple, MotionCache, build_frame_tuple, filter_tuples, format_tuple_list,
                    group_tuples, parse_tuple_list, tuple_mean_baseline)
from .mesh import read_sequence, write_obj
from .raster import DepthMap, read_motion_map, write_motion_map
from .refine import compose_depth, optimize_detail
from .synth import MOTION_KINDS, Bump, default_intrinsics, generate_scene, render_appearance

log = logging.getLogger("nrdepth")

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3


# --------------------------------------------------------------------------- helpers

def _target_dir(root, target: int) -> Path:
    return Path(root) / f"target_{target:04d}"


def _depth_array(depth: DepthMap) -> np.ndarray:
    return np.where(depth.valid, depth.values, 0.0)


def _read_depth(path) -> DepthMap:
    path = Path(path)
    if not path.exists():
        raise InputError(f"missing depth file {path}")
    return DepthMap.from_array(read_pfm(path))


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise InputError(f"missing file {path}")
    return path


def apply_intrinsic_overrides(K: Intrinsics, cfg: PipelineConfig) -> Intrinsics:
    changes = {k: getattr(cfg, k) for k in ("focal_x", "focal_y", "principal_x", "principal_y")
               if getattr(cfg, k) is not None}
    return dataclasses.replace(K, **changes) if changes else K


def working_intrinsics(K: Intrinsics, resolution: int) -> tuple[Intrinsics, int]:
    """Intrinsics at the working width and the integer downsampling factor."""
    if K.width <= resolution:
        return K, 1
    if K.width % resolution:
        raise InputError(f"image width {K.width} is not a multiple of the working resolution {resolution}")
    factor = K.width // resolution
    if K.height % factor:
        raise InputError(f"image height {K.height} is not divisible by {factor}")
    return K.scaled(1.0 / factor, K.width // factor, K.height // factor), factor


# --------------------------------------------------------------------------- synth

def write_scene(scene, out) -> Path:
    """Dump meshes, images and ground-truth depth plus a manifest; returns the manifest path."""
    out = ensure_dir(out)
    for sub in ("meshes", "images", "gt"):
        ensure_dir(out / sub)
    frames = []
    for f in range(scene.n_frames):
        mesh_rel = Path("meshes") / f"frame_{f:04d}.obj"
        img_rel = Path("images") / f"frame_{f:04d}.png"
        gt_rel = Path("gt") / f"depth_{f:04d}.pfm"
        write_obj(out / mesh_rel, scene.base_mesh(f))
        image, depth = render_appearance(scene, f)
        write_image(out / img_rel, image)
        write_pfm(out / gt_rel, _depth_array(depth))
        frames.append(FrameEntry(mesh_rel, img_rel, gt_rel))
    path = out / "manifest.txt"
    write_manifest(path, Manifest(scene.K, frames, 30.0, out))
    bumps = "; ".join(" ".join(repr(float(v)) for v in (b.amplitude, b.sigma, b.height, b.azimuth)) for b in scene.bumps)
    (out / "scene.txt").write_text(
        f"seed = {scene.seed}\nmotion_kind = {scene.kind}\nframes = {scene.n_frames}\n"
        f"bumps = {bumps or 'none'}\nshading_drift = {str(scene.shading_drift).lower()}\n")
    return path


def run_synth(out, seed: int = 0, kind: str = "rigid", frames: int = 19, resolution: int = 256,
              bump: bool = True, amplitude: float = 0.03, shading_drift: bool = False) -> Path:
    bumps = (Bump(amplitude=amplitude),) if bump else ()
    scene = generate_scene(seed=seed, frames=frames, motion_kind=kind, bumps=bumps,
                           K=default_intrinsics(resolution), shading_drift=shading_drift)
    return write_scene(scene, out)


# --------------------------------------------------------------------------- motion

def write_tuple(dirpath, tup: FrameTuple) -> None:
    d = ensure_dir(dirpath)
    mean = tuple_mean_baseline(tup)
    lines = [f"target = {tup.target}\n",
             f"references = {','.join(str(r) for r in tup.references)}\n",
             format_intrinsics(tup.K),
             f"mean_baseline = {mean if mean is None else float(mean)!r}\n"]
    (d / "tuple.txt").write_text("".join(lines))
    write_pfm(d / "image.pfm", tup.image)
    write_pfm(d / "base_depth.pfm", _depth_array(tup.base))
    sils = tup.ref_silhouettes or [None] * len(tup.references)
    for r, img, motion, mask, sil in zip(tup.references, tup.ref_images, tup.motions, tup.masks, sils):
        write_pfm(d / f"image_r{r:04d}.pfm", img)
        write_motion_map(d / f"motion_r{r:04d}.nrmm", motion)
        write_mask(d / f"mask_r{r:04d}.png", mask)
        if sil is not None:
            write_mask(d / f"silhouette_r{r:04d}.png", sil)


def read_tuple(dirpath) -> FrameTuple:
    d = Path(dirpath)
    info_path = _require(d / "tuple.txt")
    info = {k: v for k, v, _ in parse_key_values(info_path.read_text(), str(info_path))}
    try:
        target = int(info["target"])
        refs = [int(x) for x in info["references"].split(",") if x.strip()]
    except (KeyError, ValueError) as exc:
        raise InputError(f"{info_path}: malformed tuple description") from exc
    K = read_intrinsics_file(info_path)
    image = read_image(_require(d / "image.pfm"))
    base = _read_depth(d / "base_depth.pfm")
    ref_images, motions, masks, sils = [], [], [], []
    for r in refs:
        ref_images.append(read_image(_require(d / f"image_r{r:04d}.pfm")))
        motions.append(read_motion_map(_require(d / f"motion_r{r:04d}.nrmm")))
        masks.append(read_mask(_require(d / f"mask_r{r:04d}.png")))
        sil = d / f"silhouette_r{r:04d}.png"
        sils.append(read_mask(sil) if sil.exists() else None)
    # silhouettes are optional, but only as a set
    if any(s is None for s in sils):
        if not all(s is None for s in sils):
            raise InputError(f"{d}: reference silhouettes present for only some references")
        sils = None
    return FrameTuple(target, refs, K, image, ref_images, motions, masks, base, sils)


def run_motion(manifest_path, out, cfg: PipelineConfig) -> list[int]:
    """Group, build, filter and write frame tuples; returns the kept target frames."""
    manifest = read_manifest(manifest_path)
    K_full = apply_intrinsic_overrides(manifest.intrinsics, cfg)
    K, factor = working_intrinsics(K_full, cfg.resolution)
    seq = read_sequence([manifest.resolve(f.mesh) for f in manifest.frames], manifest.frame_rate)
    images = []
    for f in manifest.frames:
        img = read_image(_require(manifest.resolve(f.image)))
        if img.shape[:2] != K_full.shape:
            raise InputError(f"{f.image}: image is {img.shape[1]}x{img.shape[0]}, "
                             f"intrinsics say {K_full.width}x{K_full.height}")
        images.append(downsample(img, factor))

    groups = group_tuples(len(seq.frames), cfg.gap, cfg.offsets, cfg.min_references)
    cache = MotionCache(seq, K)
    built = []
    for target, refs in groups:
        try:
            if not cache.depth(target).valid.any():
                log.warning("frame %d: empty silhouette; tuple skipped", target)
                continue
            built.append(build_frame_tuple(cache, images, target, refs,
                                           cfg.pixel_baseline, cfg.visibility_tolerance))
        except BehindCameraError as exc:
            log.warning("frame %d: %s; tuple skipped", target, exc)
    kept = filter_tuples(built, cfg.tuple_baseline)

    out = ensure_dir(out)
    (out / "tuples.txt").write_text(format_tuple_list([(t.target, t.references) for t in kept]))
    (out / "intrinsics.txt").write_text(format_intrinsics(K))
    (out / "config.txt").write_text(cfg.to_text())
    for tup in kept:
        write_tuple(_target_dir(out, tup.target), tup)
    log.info("%d of %d tuples kept", len(kept), len(groups))
    return [t.target for t in kept]


# --------------------------------------------------------------------------- refine

def refine_tuple_dir(dirpath, cfg: PipelineConfig) -> str:
    """Optimize one tuple directory in place; returns the summary line."""
    from .plotting import refine_figure

    d = Path(dirpath)
    tup = read_tuple(d)
    result = optimize_detail(tup, cfg.optimizer, cfg.loss_weights)
    offset = np.where(tup.base.valid, result.detail.offset, 0.0)
    composed = compose_depth(tup.base, result.detail)
    write_pfm(d / "detail.pfm", offset)
    write_pfm(d / "composed.pfm", _depth_array(composed))
    log_lines = ["# iteration, photo, smooth, regularizer, total\n"]
    log_lines += [b.log_line(i) + "\n" for i, b in enumerate(result.trace)]
    (d / "loss.log").write_text("".join(log_lines))
    b = result.best
    line = (f"target {tup.target}: iterations={len(result.trace) - 1} best={result.best_iteration} "
            f"photo={b.photo:.6e} smooth={b.smooth:.6e} regularizer={b.regularizer:.6e} total={b.total:.6e}")
    (d / "summary.txt").write_text(line + "\n")
    if cfg.figures:
        refine_figure(d / "refine.png", tup.base, offset, composed, result.trace, title=f"target frame {tup.target}")
    return line


def _refine_job(job):
    return refine_tuple_dir(*job)


def run_refine(tuples_dir, cfg: PipelineConfig) -> list[str]:
    root = Path(tuples_dir)
    listing = _require(root / "tuples.txt")
    groups = parse_tuple_list(listing.read_text())
    dirs = [_target_dir(root, t) for t, _ in groups]
    for d in dirs:
        _require(d / "tuple.txt")
    jobs = [(d, cfg) for d in dirs]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(_refine_job, jobs))
    return [_refine_job(j) for j in jobs]


# --------------------------------------------------------------------------- eval

def load_cloud(path, K: Intrinsics | None) -> np.ndarray:
    path = _require(path)
    if path.suffix.lower() == ".pfm":
        if K is None:
            raise InputError(f"{path}: depth input needs intrinsics")
        return depth_to_cloud(_read_depth(path), K)
    return read_xyz(path)


def evaluate_report(rows, cfg: PipelineConfig, figure=None, register: bool = True):
    """Score ``(label, result_cloud, truth_cloud)`` rows; returns the report text."""
    scored = []
    for label, result, truth in rows:
        ev = evaluate_clouds(result, truth, THRESHOLDS, register=register,
                             trim=cfg.icp_trim, iterations=cfg.icp_iterations)
        scored.append((label, ev))
    text = format_table([(label, ev.metrics) for label, ev in scored]) + "\n"
    single = len(scored) == 1
    for label, ev in scored:
        prefix = "" if single else label.lower().replace(" ", "_") + "_"
        text += format_key_values(ev.metrics, prefix)
        if ev.icp is not None:
            text += f"{prefix}icp_iterations = {ev.icp.iterations}\n"
    if figure is not None and cfg.figures:
        from .plotting import eval_figure

        eval_figure(figure, [(label, ev.errors) for label, ev in scored], THRESHOLDS)
    return text


# --------------------------------------------------------------------------- pipeline

def run_pipeline(out, cfg: PipelineConfig, manifest=None, kind: str = "rigid", frames: int = 19,
                 bump: bool = True) -> str:
    out = ensure_dir(out)
    if manifest is None:
        manifest = run_synth(out / "scene", seed=cfg.seed, kind=kind, frames=frames,
                             resolution=cfg.resolution, bump=bump)
    (out / "config.txt").write_text(cfg.to_text())
    tuples_dir = out / "tuples"
    targets = run_motion(manifest, tuples_dir, cfg)
    summaries = run_refine(tuples_dir, cfg)
    m = read_manifest(manifest)
    K_full = apply_intrinsic_overrides(m.intrinsics, cfg)
    K, _ = working_intrinsics(K_full, cfg.resolution)
    eval_dir = ensure_dir(out / "eval")
    report = "".join(s + "\n" for s in summaries) + "\n"
    for t in targets:
        gt = m.frames[t].gt_depth
        if gt is None:
            continue
        truth = depth_to_cloud(_read_depth(m.resolve(gt)), K_full)
        d = _target_dir(tuples_dir, t)
        rows = [("Base", depth_to_cloud(_read_depth(d / "base_depth.pfm"), K), truth),
                ("Ours", depth_to_cloud(_read_depth(d / "composed.pfm"), K), truth)]
        text = evaluate_report(rows, cfg, figure=eval_dir / f"target_{t:04d}.png")
        (eval_dir / f"target_{t:04d}.txt").write_text(text)
        report += f"[target {t}]\n" + text + "\n"
    (out / "report.txt").write_text(report)
    return report


# --------------------------------------------------------------------------- argparse

def _add_config_args(p):
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("--workers", type=int, help="shorthand for --set workers=N")
    p.add_argument("--no-figures", action="store_true", help="skip PNG figures")


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise InputError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.workers is not None:
        overrides["workers"] = str(args.workers)
    if args.no_figures:
        overrides["figures"] = "false"
    return cfg.updated(overrides, "command line")


def _cmd_synth(args):
    cfg = load_config(args)
    path = run_synth(args.out, seed=cfg.seed, kind=args.kind, frames=args.frames,
                     resolution=cfg.resolution, bump=not args.no_bump, amplitude=args.amplitude,
                     shading_drift=args.shading_drift)
    print(f"manifest = {path}")
    return EXIT_OK


def _cmd_motion(args):
    cfg = load_config(args)
    targets = run_motion(args.manifest, args.out, cfg)
    print(f"tuples = {len(targets)}")
    for t in targets:
        print(f"target = {t}")
    return EXIT_OK


def _cmd_refine(args):
    cfg = load_config(args)
    for line in run_refine(args.tuples, cfg):
        print(line)
    return EXIT_OK


def _cmd_eval(args):
    cfg = load_config(args)
    K = read_intrinsics_file(_require(args.intrinsics)) if args.intrinsics else None
    K_truth = read_intrinsics_file(_require(args.truth_intrinsics)) if args.truth_intrinsics else K
    truth = load_cloud(args.truth, K_truth)
    rows = []
    if args.base:
        rows.append(("Base", load_cloud(args.base, K), truth))
    rows.append((args.label, load_cloud(args.result, K), truth))
    figure = None
    if args.out:
        out = Path(args.out)
        ensure_dir(out.parent)
        figure = out.with_suffix(".png")
    text = evaluate_report(rows, cfg, figure=figure, register=not args.no_icp)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _cmd_pipeline(args):
    cfg = load_config(args)
    report = run_pipeline(args.out, cfg, manifest=args.manifest, kind=args.kind,
                          frames=args.frames, bump=not args.no_bump)
    sys.stdout.write(report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nrdepth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic textured scene")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=MOTION_KINDS, default="rigid")
    p.add_argument("--frames", type=int, default=19)
    p.add_argument("--amplitude", type=float, default=0.03, help="bump height in meters")
    p.add_argument("--no-bump", action="store_true")
    p.add_argument("--shading-drift", action="store_true", help="shade with posed normals")
    _add_config_args(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("motion", help="motion maps, masks and base depths per tuple")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=_cmd_motion)

    p = sub.add_parser("refine", help="optimize the detail map of every tuple")
    p.add_argument("--tuples", required=True, help="output directory of the motion stage")
    _add_config_args(p)
    p.set_defaults(func=_cmd_refine)

    p = sub.add_parser("eval", help="accuracy and MAE against a ground-truth cloud")
    p.add_argument("--result", required=True, help="depth PFM or XYZ cloud")
    p.add_argument("--truth", required=True, help="depth PFM or XYZ cloud")
    p.add_argument("--intrinsics", help="key = value intrinsics of the result depth")
    p.add_argument("--truth-intrinsics", help="intrinsics of the truth depth (default: same)")
    p.add_argument("--base", help="optional base depth scored as an extra row")
    p.add_argument("--label", default="Ours")
    p.add_argument("--no-icp", action="store_true")
    p.add_argument("--out", help="also write the report here and a PNG next to it")
    _add_config_args(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("pipeline", help="synth (or manifest) -> motion -> refine -> eval")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help="use this sequence instead of a synthetic one")
    p.add_argument("--kind", choices=MOTION_KINDS, default="rigid")
    p.add_argument("--frames", type=int, default=19)
    p.add_argument("--no-bump", action="store_true")
    _add_config_args(p)
    p.set_defaults(func=_cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"nrdepth: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (NRDepthError, OSError) as exc:
        print(f"nrdepth: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
