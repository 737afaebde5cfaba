#!/usr/bin/env python3
import argparse
import json
import logging
import os
import sys
from importlib import metadata
from typing import Any, Dict, List

import numpy as np

from .blendshape_model import (
    Pose,
    export_obj,
    landmarks_3d,
    load_model,
    load_obj,
    pose_mesh,
    save_model,
    triangle_frames,
)
from .config import RunConfig
from .const import NAME
from .errors import InvalidInputError, MissingInputError, NumericalAbortError, RigSplatError
from .eval_bench import evaluate, load_scan
from .fit_engine import PARAM_GROUPS, fit
from .gaussian_rig import bind_splats
from .image_io import (
    JsonLinesLog,
    read_landmark_pairs,
    read_landmarks,
    write_json,
    write_landmarks,
    write_png,
    write_render,
)
from .shading import lighting_coeffs, load_prior, save_prior, shade, synthetic_prior
from .splat_renderer import Camera, render
from .state_manager import CheckpointManager
from .synth import frame_dir, generate, load_dataset
from .utils import handle_exception, normalize_quat, quat_from_euler_deg, quat_multiply

# Setup root logger for the application
log = logging.getLogger(__name__.split('.')[0])

CONFIG_ECHO = "config.json"
PRIOR_FILE = "lighting_prior.txt"


def _version() -> str:
    try:
        return metadata.version(NAME)
    except metadata.PackageNotFoundError:
        return "unknown"


def _handle_output(result: Dict[str, Any], args: argparse.Namespace) -> None:
    """Prints result as JSON or plain text based on args."""
    if args.json:
        print(json.dumps(result, indent=2, sort_keys=True))
    elif 'msg' in result:
        print(result['msg'])


def _make_output_dir(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise InvalidInputError(f"Cannot create output directory '{path}': {e}") from e


@handle_exception
def cmd_synth(config: RunConfig, args: argparse.Namespace) -> None:
    """Handler for the 'synth' command."""
    config.override("synth", n_frames=args.frames, resolution=args.resolution,
                    scan_points=args.scan_points, model=args.model)
    result = generate(config.synth, args.output, config.threads)
    write_json(os.path.join(args.output, CONFIG_ECHO), config.to_dict())
    _handle_output(result, args)


@handle_exception
def cmd_fit(config: RunConfig, args: argparse.Namespace) -> None:
    """Handler for the 'fit' command."""
    dataset = load_dataset(args.dataset, args.model)
    overrides: Dict[str, Any] = {"iterations": args.iterations, "resolution": args.resolution,
                                 "t_densify": args.t_densify}
    if args.resolution is None and "fit.resolution" not in config.explicit:
        overrides["resolution"] = dataset.frames[0].camera.height
    for group in args.freeze or []:
        overrides[f"lr_{group}"] = 0.0
    config.override("fit", **overrides)
    prior = load_prior(args.lighting_prior) if args.lighting_prior else synthetic_prior()
    state = None
    if args.resume:
        state, _ = CheckpointManager(os.path.join(args.resume, "checkpoint")).load()

    records: List[Dict[str, Any]] = []
    out = args.output

    def on_report(report, elapsed):
        records.append(report.to_record(elapsed))

    def on_snapshot(iteration, buffers):
        directory = os.path.join(out, "snapshots")
        os.makedirs(directory, exist_ok=True)
        write_png(os.path.join(directory, f"iter_{iteration:06d}.png"), buffers.color)

    def write_log():
        _make_output_dir(out)
        with JsonLinesLog(os.path.join(out, "loss_log.jsonl")) as loss_log:
            for record in records:
                loss_log.write(record)

    try:
        result = fit(dataset.frames, dataset.model, config.fit, prior, state, on_report, on_snapshot,
                     config.threads)
    except NumericalAbortError as e:
        write_log()
        write_json(os.path.join(out, "abort.json"), {"term": e.term, "iteration": e.iteration, "msg": e.message})
        write_json(os.path.join(out, CONFIG_ECHO), config.to_dict())
        raise

    write_log()
    save_model(dataset.model, os.path.join(out, "model.txt"))
    checkpoint = CheckpointManager(os.path.join(out, "checkpoint"))
    checkpoint.save(result.state, {
        "dataset": os.path.abspath(args.dataset),
        "cameras": [frame.camera.to_dict() for frame in dataset.frames],
        "background": list(config.fit.background),
    })
    save_prior(prior, os.path.join(checkpoint.directory, PRIOR_FILE))
    for index, buffers in enumerate(result.renders):
        directory = frame_dir(out, index)
        write_render(directory, buffers, ppm=True)
        export_obj(result.vertices[index], dataset.model.faces, os.path.join(directory, "mesh.obj"))
        write_landmarks(os.path.join(directory, "mesh_landmarks.txt"), result.landmarks[index])
    write_json(os.path.join(out, CONFIG_ECHO), config.to_dict())

    l1 = [record["terms"]["l1"] for record in records]
    _handle_output({
        "msg": f"Fitted {len(dataset.frames)} frame(s) to iteration {result.state.iteration}; outputs in {out}.",
        "iteration": result.state.iteration,
        "initial_l1": l1[0] if l1 else None,
        "final_l1": l1[-1] if l1 else None,
        "splats": len(result.state.prototypes),
        "output": out,
    }, args)


@handle_exception
def cmd_render(config: RunConfig, args: argparse.Namespace) -> None:
    """Handler for the 'render' command."""
    config.override("render", frame=args.frame, drive_frame=args.drive_frame, resolution=args.resolution,
                    fov_deg=args.fov, expression=args.expression, rotation_deg=args.rotate,
                    translation=args.translation)
    settings = config.render
    model_path = os.path.join(args.run, "model.txt")
    if not os.path.exists(model_path):
        raise MissingInputError(model_path, "model file")
    checkpoint = CheckpointManager(os.path.join(args.run, "checkpoint"))
    state, saved = checkpoint.load()
    model = load_model(model_path)
    prior_path = os.path.join(checkpoint.directory, PRIOR_FILE)
    prior = load_prior(prior_path) if os.path.exists(prior_path) else synthetic_prior()

    for name, index in (("frame", settings.frame), ("drive_frame", settings.drive_frame)):
        if index is not None and index >= state.n_frames:
            raise InvalidInputError(f"{name} {index} is out of range; the checkpoint holds {state.n_frames} frame(s).")
    driver = settings.frame if settings.drive_frame is None else settings.drive_frame
    psi = state.psi[driver]
    if settings.expression is not None:
        psi = np.asarray(settings.expression, dtype=np.float64)
        if psi.shape != (model.n_expr,):
            raise InvalidInputError(f"Expression override has {psi.size} values, model defines {model.n_expr}.")
    pose = state.pose(driver)
    rotation, translation = pose.global_rotation, pose.global_translation
    if settings.rotation_deg is not None:
        rotation = normalize_quat(quat_multiply(quat_from_euler_deg(*settings.rotation_deg), rotation))
    if settings.translation is not None:
        translation = np.asarray(settings.translation, dtype=np.float64)
    pose = Pose(rotation, translation, pose.neck_rotation)

    cameras = saved.get("cameras") or [Camera().to_dict()]
    camera = Camera.from_dict(cameras[min(settings.frame, len(cameras) - 1)])
    if settings.resolution is not None or settings.fov_deg is not None:
        size = settings.resolution or camera.width
        camera = Camera(size, size, settings.fov_deg or camera.fov_deg, camera.rotation, camera.translation,
                        camera.near, camera.far)
    background = saved.get("background", settings.background)

    vertices = pose_mesh(model, state.beta, psi, pose)
    splats = bind_splats(state.prototypes, triangle_frames(vertices, model.faces))
    colors = shade(splats.albedo, splats.normal, lighting_coeffs(prior, state.lighting))
    buffers = render(splats, camera, background, colors, config.threads)
    write_render(args.output, buffers)
    export_obj(vertices, model.faces, os.path.join(args.output, "mesh.obj"))
    write_landmarks(os.path.join(args.output, "mesh_landmarks.txt"), landmarks_3d(vertices, model))
    write_json(os.path.join(args.output, CONFIG_ECHO), config.to_dict())
    _handle_output({"msg": f"Rendered frame {settings.frame} (driven by frame {driver}) to {args.output}.",
                    "frame": settings.frame, "drive_frame": driver, "output": args.output}, args)


@handle_exception
def cmd_eval(config: RunConfig, args: argparse.Namespace) -> None:
    """Handler for the 'eval' command."""
    config.override("eval", metrical=True if args.metrical else None, icp_iterations=args.icp_iterations,
                    mesh_units=args.mesh_units)
    settings = config.eval
    if args.landmark_pairs:
        mesh_landmarks, scan_landmarks = read_landmark_pairs(args.landmark_pairs)
    elif args.mesh_landmarks and args.scan_landmarks:
        mesh_landmarks = read_landmarks(args.mesh_landmarks, 3) * settings.mesh_scale
        scan_landmarks = read_landmarks(args.scan_landmarks, 3)
    else:
        raise InvalidInputError("Provide --landmark-pairs or both --mesh-landmarks and --scan-landmarks.")
    vertices, faces = load_obj(args.mesh)
    cloud = load_scan(args.scan)
    metrics = evaluate(cloud, vertices * settings.mesh_scale, faces, mesh_landmarks, scan_landmarks,
                       with_scale=not settings.metrical, icp_iterations=settings.icp_iterations,
                       threads=config.threads)
    record = metrics.to_dict()
    if args.output:
        write_json(args.output, record)
    _handle_output(dict(record, msg=f"mean {metrics.mean:.4f} mm, median {metrics.median:.4f} mm, "
                                    f"std {metrics.std:.4f} mm over {metrics.count} points"), args)


def create_parser() -> argparse.ArgumentParser:
    """Creates and returns the argument parser for the CLI."""
    parser = argparse.ArgumentParser(
        prog=NAME,
        description="Fit, render and evaluate mesh-rigged Gaussian head avatars.",
    )
    parser.add_argument(
        "--version", action="version", version=f"{NAME} {_version()}"
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=0,
        help="Increase verbosity level (-v for warning, -vv for info, -vvv for debug)."
    )
    parser.add_argument("--config", help="JSON configuration file; flags override its values.")
    parser.add_argument("--threads", type=int, help="Worker threads (default: all cores).")
    parser.add_argument("--seed", type=int, help="Run seed for every random stream.")
    subparsers = parser.add_subparsers(dest="command", required=True, help="Available commands")

    p_synth = subparsers.add_parser("synth", help="Generate a synthetic ground-truth dataset.")
    p_synth.add_argument("output", help="Dataset directory to write.")
    p_synth.add_argument("--frames", type=int, help="Number of frames.")
    p_synth.add_argument("--resolution", type=int, help="Image width and height in pixels.")
    p_synth.add_argument("--scan-points", type=int, help="Number of scan surface samples.")
    p_synth.add_argument("--model", help="Model file, or 'builtin' for the bundled head.")
    p_synth.add_argument("--json", action="store_true", help="Output as JSON.")
    p_synth.set_defaults(func=cmd_synth)

    p_fit = subparsers.add_parser("fit", help="Fit an avatar to a dataset.")
    p_fit.add_argument("dataset", help="Dataset directory.")
    p_fit.add_argument("output", help="Output directory.")
    p_fit.add_argument("--iterations", type=int, help="Total optimizer iterations.")
    p_fit.add_argument("--resolution", type=int, help="Fitting resolution (must match the dataset).")
    p_fit.add_argument("--t-densify", type=int, dest="t_densify",
                       help="Iterations between densify events (0 disables).")
    p_fit.add_argument("--freeze", action="append", choices=sorted(PARAM_GROUPS),
                       help="Parameter group to keep fixed; may be repeated.")
    p_fit.add_argument("--resume", help="Previous fit output directory to continue from.")
    p_fit.add_argument("--model", help="Model file overriding the dataset's model.txt ('builtin' allowed).")
    p_fit.add_argument("--lighting-prior", dest="lighting_prior", help="Lighting prior text file.")
    p_fit.add_argument("--json", action="store_true", help="Output as JSON.")
    p_fit.set_defaults(func=cmd_fit)

    p_render = subparsers.add_parser("render", help="Re-render a fitted avatar.")
    p_render.add_argument("run", help="Fit output directory.")
    p_render.add_argument("output", help="Directory for the rendered buffers.")
    p_render.add_argument("--frame", type=int, help="Frame whose camera and pose are used.")
    p_render.add_argument("--drive-frame", type=int, dest="drive_frame",
                          help="Frame whose expression and pose drive the avatar.")
    p_render.add_argument("--expression", type=float, nargs="+", help="Expression code override.")
    p_render.add_argument("--rotate", type=float, nargs=3, metavar=("RX", "RY", "RZ"),
                          help="Extra head rotation in degrees, applied on top of the pose.")
    p_render.add_argument("--translation", type=float, nargs=3, metavar=("X", "Y", "Z"),
                          help="Head translation override.")
    p_render.add_argument("--resolution", type=int, help="Output width and height in pixels.")
    p_render.add_argument("--fov", type=float, help="Vertical field of view in degrees.")
    p_render.add_argument("--json", action="store_true", help="Output as JSON.")
    p_render.set_defaults(func=cmd_render)

    p_eval = subparsers.add_parser("eval", help="Point-to-surface distances between a mesh and a scan.")
    p_eval.add_argument("--mesh", required=True, help="OBJ mesh.")
    p_eval.add_argument("--scan", required=True, help="PLY point cloud in millimetres.")
    p_eval.add_argument("--landmark-pairs", dest="landmark_pairs",
                        help="Six-column table of mesh and scan landmarks in millimetres.")
    p_eval.add_argument("--mesh-landmarks", dest="mesh_landmarks", help="Mesh landmarks in mesh units.")
    p_eval.add_argument("--scan-landmarks", dest="scan_landmarks", help="Scan landmarks in millimetres.")
    p_eval.add_argument("--metrical", action="store_true", help="Rigid alignment; scale fixed to 1.")
    p_eval.add_argument("--icp-iterations", type=int, dest="icp_iterations", help="ICP refinement iterations.")
    p_eval.add_argument("--mesh-units", choices=["m", "mm"], dest="mesh_units", help="Units of the mesh file.")
    p_eval.add_argument("--output", help="Write the metrics record to this JSON file.")
    p_eval.add_argument("--json", action="store_true", help="Output as JSON.")
    p_eval.set_defaults(func=cmd_eval)

    return parser


def main() -> None:
    """The main entry point for the CLI application."""
    parser = create_parser()
    args = parser.parse_args()

    # --- Setup Logging ---
    log_level = logging.ERROR
    if args.verbose == 1:
        log_level = logging.WARNING
    elif args.verbose == 2:
        log_level = logging.INFO
    elif args.verbose >= 3:
        log_level = logging.DEBUG

    log.setLevel(log_level)
    handler = logging.StreamHandler(sys.stderr)
    handler.setLevel(log_level)
    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    handler.setFormatter(formatter)
    log.addHandler(handler)

    try:
        config = RunConfig.load(args.config)
        if args.seed is not None:
            config.set_seed(args.seed)
        if args.threads is not None:
            config.set_threads(args.threads)
        log.debug("Executing command: %s", args.command)
        args.func(config, args)
        log.debug("Command %s finished successfully.", args.command)
    except RigSplatError as e:
        log.error("A known error occurred: %s", e,
                  exc_info=(log_level <= logging.DEBUG))
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(e.exit_code)
    except Exception as e:
        log.critical("An unexpected error occurred: %s", e, exc_info=True)
        print(f"An unexpected error occurred: {e}", file=sys.stderr)
        sys.exit(2)
    finally:
        log.removeHandler(handler)


if __name__ == "__main__":
    main()
