"""Command-line entry point: synth | train | register | evaluate | visualize."""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import matchlayer
from . import trainer as tr
from .config import EDGE2D_METHODS, EDGE3D_MODES, PipelineConfig, desk_config
from .dataio import (FramePair, GrayImage, load_frame, load_grayscale, parse_kitti_calibration, pose_from_row,
                     read_manifest, read_point_cloud_bin, write_kitti_calibration, write_manifest,
                     write_pgm, write_point_cloud_bin, write_ppm)
from .errors import ContractError, EdgeRegError, FormatError
from .geometry import CameraIntrinsics, PoseSE3, compute_pose_error, project_points
from .pose import ransac_epnp

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2

_MODE_ALIASES = {
    "depth-only": "depth", "reflect-only": "reflect", "reflectance-only": "reflect",
    "combined": "both", "reflectance": "reflect",
}


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind, self.code = kind, code


# ------------------------------------------------------------------ json helpers

def load_schema(name: str) -> dict:
    text = resources.files("edgereg").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def _clean(obj):
    """Replace non-finite floats by None so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def emit(doc: dict, schema: str, stream=None) -> dict:
    doc = _clean(doc)
    jsonschema.validate(doc, load_schema(schema))
    stream = stream if stream is not None else sys.stdout
    stream.write(json.dumps(doc, sort_keys=True) + "\n")
    stream.flush()
    return doc


def emit_error(kind: str, message: str) -> None:
    emit({"status": "error", "error": kind, "message": message}, "error")


# ------------------------------------------------------------------ config

def parse_edge_mode(text: str, config: PipelineConfig) -> PipelineConfig:
    """Accepts ``method:mode``, a bare method, a bare mode, or aliases such as ``depth-only``."""
    method, mode = config.edge2d_method, config.edge3d_mode
    for part in text.lower().split(":"):
        part = _MODE_ALIASES.get(part, part)
        if part in EDGE2D_METHODS:
            method = part
        elif part in EDGE3D_MODES:
            mode = part
        else:
            raise CliError("usage", f"unknown edge mode component '{part}'", EXIT_INPUT)
    return config.replace(edge2d_method=method, edge3d_mode=mode)


def build_config(args) -> PipelineConfig:
    try:
        if args.config:
            config = PipelineConfig.load(args.config)
        else:
            config = desk_config()
        if args.seed is not None:
            config = config.replace(seed=args.seed)
        if args.blocks is not None:
            config = config.replace(exchange_blocks=args.blocks) if args.blocks > 0 else config.replace(use_exchange=False)
        if args.eps_c is not None:
            config = config.replace(eps_corr=args.eps_c)
        if args.edge_mode:
            config = parse_edge_mode(args.edge_mode, config)
    except FileNotFoundError as exc:
        raise CliError("io", f"config not found: {exc.filename}", EXIT_INPUT) from None
    except (ContractError, json.JSONDecodeError, TypeError) as exc:
        raise CliError("config", str(exc), EXIT_INPUT) from None
    return config


def worker_count() -> int:
    raw = os.environ.get("EDGEREG_THREADS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise CliError("usage", f"EDGEREG_THREADS must be an integer, got '{raw}'", EXIT_INPUT) from None


def _load_checkpoint(path, config):
    if not path:
        return tr.init_params(config)
    try:
        return tr.load_params(path)
    except FileNotFoundError:
        raise CliError("io", f"checkpoint not found: {path}", EXIT_INPUT) from None
    except FormatError as exc:
        raise CliError("format", str(exc), EXIT_INPUT) from None


def _load_manifest_frames(path) -> list[FramePair]:
    try:
        return [load_frame(e) for e in read_manifest(path)]
    except FileNotFoundError as exc:
        raise CliError("io", f"file not found: {exc.filename}", EXIT_INPUT) from None
    except (FormatError, KeyError, json.JSONDecodeError) as exc:
        raise CliError("format", f"bad manifest {path}: {exc}", EXIT_INPUT) from None


def _parse_pose_arg(text: str) -> PoseSE3:
    p = Path(text)
    if p.exists():
        doc = json.loads(p.read_text())
        if "pose" in doc:
            doc = doc["pose"]
        R = np.asarray(doc["R"], dtype=np.float64).reshape(3, 3)
        return PoseSE3(R, np.asarray(doc["t"], dtype=np.float64))
    try:
        return pose_from_row([float(v) for v in text.replace(",", " ").split()])
    except ValueError:
        raise CliError("usage", f"--pose needs 12 numbers or a report JSON file, got '{text}'", EXIT_INPUT) from None


# ------------------------------------------------------------------ overlay

def range_colors(ranges: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Near = red, far = blue, through yellow/green/cyan."""
    s = np.clip((ranges - lo) / max(hi - lo, 1e-9), 0.0, 1.0)
    # hue 0 (red) -> 240 deg (blue)
    h = s * 4.0
    r = np.clip(2.0 - h, 0.0, 1.0)
    g = np.clip(np.minimum(h, 4.0 - h), 0.0, 1.0)
    b = np.clip(h - 2.0, 0.0, 1.0)
    return np.round(np.stack([r, g, b], axis=1) * 255.0).astype(np.uint8)


def render_overlay(image: GrayImage, points: np.ndarray, K: CameraIntrinsics, T: PoseSE3) -> tuple[np.ndarray, int]:
    """RGB overlay of ``points`` (N x 3, LiDAR frame) projected by ``T``; returns (image, points drawn)."""
    gray = np.round(np.clip(image.intensities, 0.0, 1.0) * 255.0).astype(np.uint8)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    proj = project_points(K, T, points)
    u = np.floor(proj.uv[:, 0] + 0.5) if len(points) else np.zeros(0)
    v = np.floor(proj.uv[:, 1] + 0.5) if len(points) else np.zeros(0)
    ok = proj.in_front & (u >= 0) & (u < image.width) & (v >= 0) & (v < image.height)
    if not ok.any():
        return rgb, 0
    rng_m = np.linalg.norm(T.apply(points[ok]), axis=1)
    colors = range_colors(rng_m, float(rng_m.min()), float(rng_m.max()))
    # far first so nearer points win on shared pixels
    order = np.argsort(-rng_m, kind="stable")
    rgb[v[ok][order].astype(int), u[ok][order].astype(int)] = colors[order]
    return rgb, int(ok.sum())


# ------------------------------------------------------------------ subcommands

def cmd_synth(args) -> int:
    from .synthetic import SceneSpec, generate_synthetic_frame

    out = Path(args.out)
    spec_fields = json.loads(Path(args.scene).read_text()) if args.scene else {}
    try:
        spec = SceneSpec(**spec_fields)
    except TypeError as exc:
        raise CliError("config", f"bad scene spec: {exc}", EXIT_INPUT) from None
    seed = 0 if args.seed is None else args.seed
    try:
        out.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(seed)
        entries = []
        for i in range(args.count):
            frame = generate_synthetic_frame(rng, spec)
            name = f"{i:06d}"
            write_point_cloud_bin(out / f"{name}.bin", frame.cloud)
            write_pgm(out / f"{name}.pgm", frame.image)
            write_kitti_calibration(out / f"{name}.txt", frame.K, frame.T_gt)
            entries.append({"name": name, "cloud": f"{name}.bin", "image": f"{name}.pgm", "calib": f"{name}.txt"})
        manifest = out / "manifest.json"
        write_manifest(manifest, entries)
    except OSError as exc:
        raise CliError("io", f"cannot write dataset: {exc}", EXIT_INPUT) from None
    emit({"manifest": str(manifest), "frames": len(entries)}, "synth_manifest")
    return EXIT_OK


def cmd_train(args) -> int:
    config = build_config(args)
    frames = _load_manifest_frames(args.manifest)
    params = tr.load_params(args.init) if args.init else tr.init_params(config)
    state = tr.TrainState.create(params, config.seed)
    t0 = time.perf_counter()
    state = tr.train(frames, config, args.steps, args.batch, state, time_budget_s=args.time_budget)
    seconds = time.perf_counter() - t0
    try:
        tr.save_params(args.checkpoint, state.params)
        if args.log:
            tr.write_log(args.log, state.history)
    except OSError as exc:
        raise CliError("io", f"cannot write outputs: {exc}", EXIT_INPUT) from None
    emit({"steps": state.step, "checkpoint": str(args.checkpoint), "log": args.log, "seconds": seconds,
          "losses": dict(state.running)}, "train_summary")
    return EXIT_OK


def _single_frame(args) -> FramePair:
    try:
        cloud = read_point_cloud_bin(args.cloud)
        image = load_grayscale(args.image)
        T_gt = None
        if args.calib:
            K, T_gt = parse_kitti_calibration(args.calib)
        elif args.K:
            K = CameraIntrinsics(*args.K)
        else:
            raise CliError("usage", "either --calib or --K fx fy cx cy is required", EXIT_INPUT)
        if args.gt:
            T_gt = _parse_pose_arg(args.gt)
    except FileNotFoundError as exc:
        raise CliError("io", f"file not found: {exc.filename}", EXIT_INPUT) from None
    except (FormatError, ContractError) as exc:
        raise CliError("format", str(exc), EXIT_INPUT) from None
    meta = {"name": Path(args.cloud).stem, "has_gt": T_gt is not None}
    return FramePair(cloud, image, K, T_gt if T_gt is not None else PoseSE3.identity(), meta)


def cmd_register(args) -> int:
    config = build_config(args)
    frame = _single_frame(args)
    params = _load_checkpoint(args.checkpoint, config)
    rng = np.random.default_rng(config.seed)
    timings = {}

    t0 = time.perf_counter()
    kp2d, edges = tr.frame_edges(frame, config)
    timings["edges"] = (time.perf_counter() - t0) * 1e3
    t = time.perf_counter()
    try:
        out = tr.forward_frame(frame, params, config, rng, augment=False)
    except tr.EmptyFrameError as exc:
        emit_error("pipeline", str(exc))
        return EXIT_FAIL
    timings["network"] = (time.perf_counter() - t) * 1e3
    t = time.perf_counter()
    corr = matchlayer.extract_correspondences(out.assignment.P, config.min_confidence).resolve(out.kp2d, out.kp3d)
    timings["matching"] = (time.perf_counter() - t) * 1e3
    if args.dump_corr:
        corr.to_csv(args.dump_corr)
    if len(corr) < 4:
        emit_error("pipeline", f"only {len(corr)} correspondences; need at least 4 for pose recovery")
        return EXIT_FAIL
    t = time.perf_counter()
    result = ransac_epnp(corr.pixels, corr.points, frame.K, config.ransac_threshold, config.ransac_confidence,
                         config.ransac_max_iters, rng)
    timings["pose"] = (time.perf_counter() - t) * 1e3
    timings["total"] = (time.perf_counter() - t0) * 1e3
    if not result.success:
        emit_error("pipeline", f"pose recovery failed after {result.iterations_used} iterations")
        return EXIT_FAIL

    pose = result.pose
    report = {
        "status": "ok",
        "pose": {"R": pose.R.ravel().tolist(), "t": pose.t.tolist()},
        "rre": None, "rte": None,
        "correspondences": len(corr),
        "inliers": result.inlier_count,
        "edge_pixels": len(kp2d),
        "edge_points": len(edges),
        "timings_ms": timings,
    }
    if frame.meta["has_gt"]:
        err = compute_pose_error(frame.T_gt, pose)
        report["rre"], report["rte"] = err.rre, err.rte
    if args.overlay:
        rgb, _ = render_overlay(frame.image, frame.cloud.xyz, frame.K, pose)
        write_ppm(args.overlay, rgb)
    emit(report, "register_report")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = build_config(args)
    frames = _load_manifest_frames(args.manifest)
    if not frames:
        raise CliError("contract", "manifest lists no frames", EXIT_INPUT)
    params = _load_checkpoint(args.checkpoint, config)
    summary = tr.evaluate_dataset(frames, params, config, workers=worker_count())
    doc = summary.to_dict()
    doc.update(edge_mode=f"{config.edge2d_method}:{config.edge3d_mode}",
               precision=summary.precision, random_precision=summary.random_precision)
    emit(doc, "evaluate_summary")
    return EXIT_OK


def cmd_visualize(args) -> int:
    if args.manifest:
        frames = read_manifest(args.manifest)
        if not 0 <= args.index < len(frames):
            raise CliError("usage", f"--index {args.index} outside manifest of {len(frames)} frames", EXIT_INPUT)
        try:
            frame = load_frame(frames[args.index])
        except FileNotFoundError as exc:
            raise CliError("io", f"file not found: {exc.filename}", EXIT_INPUT) from None
        frame.meta["has_gt"] = True
    else:
        frame = _single_frame(args)
    if args.pose:
        pose = _parse_pose_arg(args.pose)
    elif frame.meta.get("has_gt"):
        pose = frame.T_gt
    else:
        raise CliError("usage", "no pose given and the frame carries no ground truth", EXIT_INPUT)
    rgb, drawn = render_overlay(frame.image, frame.cloud.xyz, frame.K, pose)
    try:
        write_ppm(args.out, rgb)
    except OSError as exc:
        raise CliError("io", f"cannot write {args.out}: {exc}", EXIT_INPUT) from None
    emit({"output": str(args.out), "points_drawn": drawn}, "visualize_result")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with PipelineConfig fields (defaults to the desk config)")
    p.add_argument("--seed", type=int, help="overrides config seed")
    p.add_argument("--edge-mode", help="method:mode, e.g. lsd:both, canny:depth or depth-only")
    p.add_argument("--blocks", type=int, help="exchange blocks; 0 disables the exchange stack")
    p.add_argument("--eps-c", type=float, help="pixel radius for ground-truth pairs")


def _frame_inputs(p: argparse.ArgumentParser, required: bool) -> None:
    p.add_argument("--cloud", required=required, help="KITTI .bin point cloud")
    p.add_argument("--image", required=required, help="grayscale image (PGM/PPM or any Pillow format)")
    p.add_argument("--calib", help="KITTI calibration file (P2 and Tr rows)")
    p.add_argument("--K", nargs=4, type=float, metavar=("FX", "FY", "CX", "CY"))
    p.add_argument("--gt", help="ground-truth pose: 12 numbers (row-major 3x4) or a report JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgereg", description="Edge-based LiDAR-camera registration.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--scene", help="JSON file with SceneSpec overrides")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a manifest")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--init", help="checkpoint to resume from")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--time-budget", type=float, help="seconds")
    p.add_argument("--log", help="CSV loss log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="register one frame")
    _common(p)
    _frame_inputs(p, required=True)
    p.add_argument("--checkpoint", help="trained weights (random init when omitted)")
    p.add_argument("--dump-corr", help="write predicted correspondences as CSV")
    p.add_argument("--overlay", help="write a PPM overlay using the estimated pose")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="evaluate a manifest")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("visualize", help="draw a projected cloud over its image")
    _common(p)
    _frame_inputs(p, required=False)
    p.add_argument("--manifest")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--pose", help="12 numbers (row-major 3x4) or a register report JSON; defaults to ground truth")
    p.add_argument("--out", required=True, help="output .ppm")
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "visualize" and not args.manifest and not (args.cloud and args.image):
        parser.error("visualize needs --manifest or --cloud and --image")
    try:
        return args.func(args)
    except CliError as exc:
        emit_error(exc.kind, str(exc))
        return exc.code
    except EdgeRegError as exc:
        emit_error(type(exc).__name__, str(exc))
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
