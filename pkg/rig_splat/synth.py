"""Synthetic ground-truth datasets and the on-disk dataset layout shared by `synth` and `fit`."""
import logging
import os
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional

import numpy as np

from .blendshape_model import (
    BlendshapeModel,
    Pose,
    build_test_head,
    export_obj,
    landmarks_3d,
    load_model,
    pose_mesh,
    save_model,
    triangle_frames,
)
from .const import BUILTIN_MODEL, DEFAULT_FOV_DEG
from .errors import ConfigError, InvalidInputError, MissingInputError
from .eval_bench import ScanCloud, sample_surface, write_scan
from .fit_engine import TargetFrame, framing_translation
from .gaussian_rig import GaussianPrototypes, bind_splats, init_prototypes, write_prototypes
from .image_io import read_json, read_landmarks, read_png, write_json, write_landmarks, write_png
from .mesh_raster import project_points, rasterize_mesh
from .shading import LightingPrior, lighting_coeffs, shade, synthetic_prior
from .splat_renderer import Camera, render
from .utils import quat_from_euler_deg, rng_stream

# --- Logger Setup ---
logger = logging.getLogger(__name__)

MODEL_FILE = "model.txt"
FRAMES_DIR = "frames"
GROUND_TRUTH_FILE = "ground_truth.json"
GROUND_TRUTH_PROTOTYPES = "ground_truth_prototypes.bin"
SCAN_FILE = "scan.ply"
SCAN_LANDMARKS_FILE = "scan_landmarks.txt"
SKIN_ALBEDO = (0.80, 0.62, 0.52)


@dataclass
class SynthSpec:
    n_frames: int = 4
    resolution: int = 128
    fov_deg: float = DEFAULT_FOV_DEG
    shape_scale: float = 0.5
    expression_scale: float = 0.8
    pose_jitter_deg: float = 6.0
    lighting_scale: float = 0.5
    splat_perturbation: float = 0.3
    scan_points: int = 20000
    model: str = BUILTIN_MODEL
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_frames < 1:
            raise ConfigError("n_frames", f"must be at least 1, got {self.n_frames}")
        if self.resolution < 16:
            raise ConfigError("resolution", f"must be at least 16, got {self.resolution}")
        if not 0.0 < self.fov_deg < 180.0:
            raise ConfigError("fov_deg", "must lie in (0, 180)")
        for name in ("shape_scale", "expression_scale", "pose_jitter_deg", "lighting_scale", "splat_perturbation"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be nonnegative")
        if self.scan_points < 1:
            raise ConfigError("scan_points", "must be at least 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class GroundTruth:
    beta: np.ndarray
    psi: np.ndarray
    poses: List[Pose]
    lighting: np.ndarray
    prototypes: GaussianPrototypes

    def to_dict(self) -> Dict[str, Any]:
        return {
            "beta": self.beta.tolist(),
            "psi": self.psi.tolist(),
            "poses": [pose.to_dict() for pose in self.poses],
            "lighting": self.lighting.tolist(),
        }


@dataclass
class Dataset:
    directory: str
    model: BlendshapeModel
    frames: List[TargetFrame]


def frame_dir(root: str, index: int) -> str:
    return os.path.join(root, FRAMES_DIR, f"{index:03d}")


def resolve_model(source: str) -> BlendshapeModel:
    return build_test_head() if source == BUILTIN_MODEL else load_model(source)


def sample_ground_truth(spec: SynthSpec, model: BlendshapeModel, prior: LightingPrior) -> GroundTruth:
    """Draws codes, poses, lighting and splat appearance from the per-quantity seed streams."""
    beta = spec.shape_scale * rng_stream(spec.seed, "synth.shape").standard_normal(model.n_shape)
    psi = spec.expression_scale * rng_stream(spec.seed, "synth.expression").standard_normal(
        (spec.n_frames, model.n_expr))

    pose_rng = rng_stream(spec.seed, "synth.pose")
    base = framing_translation(spec.fov_deg)
    poses = []
    for _ in range(spec.n_frames):
        head = pose_rng.uniform(-1.0, 1.0, 3) * spec.pose_jitter_deg
        neck = pose_rng.uniform(-0.5, 0.5, 3) * spec.pose_jitter_deg
        shift = pose_rng.uniform(-1.0, 1.0, 3) * (0.002 if spec.pose_jitter_deg > 0 else 0.0)
        poses.append(Pose(quat_from_euler_deg(*head), base + shift, quat_from_euler_deg(*neck)))

    lighting = spec.lighting_scale * rng_stream(spec.seed, "synth.lighting").standard_normal(prior.n_components)

    splat_rng = rng_stream(spec.seed, "synth.splats")
    level = spec.splat_perturbation
    prototypes = init_prototypes(model)
    n = len(prototypes)
    prototypes.albedo = np.clip(np.asarray(SKIN_ALBEDO) + 0.1 * level * splat_rng.standard_normal((n, 3)), 0.0, 1.0)
    prototypes.offset = 0.1 * level * splat_rng.standard_normal((n, 3))
    prototypes.log_scale = prototypes.log_scale + 0.1 * level * splat_rng.standard_normal((n, 2))
    prototypes.opacity_logit = np.full(n, 3.0) + level * splat_rng.standard_normal(n)
    return GroundTruth(beta, psi, poses, lighting, prototypes)


def generate(spec: SynthSpec, out_dir: str, threads: Optional[int] = None) -> Dict[str, Any]:
    """Renders a ground-truth avatar into the dataset layout under out_dir."""
    model = resolve_model(spec.model)
    prior = synthetic_prior()
    truth = sample_ground_truth(spec, model, prior)
    light = lighting_coeffs(prior, truth.lighting)
    camera = Camera(spec.resolution, spec.resolution, spec.fov_deg)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise InvalidInputError(f"Cannot create output directory '{out_dir}': {e}") from e
    save_model(model, os.path.join(out_dir, MODEL_FILE))

    coverage = []
    first_vertices = None
    for index, pose in enumerate(truth.poses):
        vertices = pose_mesh(model, truth.beta, truth.psi[index], pose)
        splats = bind_splats(truth.prototypes, triangle_frames(vertices, model.faces))
        colors = shade(splats.albedo, splats.normal, light)
        buffers = render(splats, camera, (0.0, 0.0, 0.0), colors, threads)
        mesh = rasterize_mesh(vertices, model.faces, model.face_region, camera, threads)
        pixels, _ = project_points(landmarks_3d(vertices, model), camera)

        directory = frame_dir(out_dir, index)
        os.makedirs(directory, exist_ok=True)
        write_png(os.path.join(directory, "image.png"), buffers.color)
        write_png(os.path.join(directory, "matte.png"), buffers.alpha)
        write_png(os.path.join(directory, "mask.png"), mesh.face_mask.astype(np.float64))
        write_landmarks(os.path.join(directory, "landmarks.txt"), pixels)
        write_json(os.path.join(directory, "camera.json"), camera.to_dict())
        coverage.append(int(np.count_nonzero(mesh.coverage)))
        if index == 0:
            first_vertices = vertices
        logger.info("Synthesized frame %d (%d covered pixels).", index, coverage[-1])

    write_json(os.path.join(out_dir, GROUND_TRUTH_FILE), truth.to_dict())
    write_prototypes(truth.prototypes, os.path.join(out_dir, GROUND_TRUTH_PROTOTYPES))
    export_obj(first_vertices, model.faces, os.path.join(out_dir, "ground_truth_frame000.obj"))

    # scan of frame 0 in millimetres
    points_mm, _ = sample_surface(first_vertices * 1000.0, model.faces, spec.scan_points,
                                  rng_stream(spec.seed, "synth.scan"))
    write_scan(os.path.join(out_dir, SCAN_FILE), ScanCloud(points_mm))
    write_landmarks(os.path.join(out_dir, SCAN_LANDMARKS_FILE), landmarks_3d(first_vertices, model) * 1000.0)
    return {"msg": f"Synthesized {spec.n_frames} frame(s) into {out_dir}.", "frames": spec.n_frames,
            "coverage": coverage, "output": out_dir}


def load_dataset(directory: str, model_path: Optional[str] = None) -> Dataset:
    """Reads a dataset directory; every required file is checked before any image is decoded."""
    if not os.path.isdir(directory):
        raise MissingInputError(directory, "dataset directory")
    model_path = model_path or os.path.join(directory, MODEL_FILE)
    if model_path != BUILTIN_MODEL and not os.path.exists(model_path):
        raise MissingInputError(model_path, "model file")
    frames_root = os.path.join(directory, FRAMES_DIR)
    names = sorted(os.listdir(frames_root)) if os.path.isdir(frames_root) else []
    if not names:
        raise MissingInputError(frames_root, "frames directory")
    for name in names:
        for required in ("image.png", "landmarks.txt", "camera.json"):
            path = os.path.join(frames_root, name, required)
            if not os.path.exists(path):
                raise MissingInputError(path, "frame file")

    model = resolve_model(model_path)
    frames = []
    for name in names:
        path = os.path.join(frames_root, name)
        camera = Camera.from_dict(read_json(os.path.join(path, "camera.json"), "camera file"))
        matte_path, mask_path = os.path.join(path, "matte.png"), os.path.join(path, "mask.png")
        matte = read_png(matte_path, grayscale=True) if os.path.exists(matte_path) else None
        mask = read_png(mask_path, grayscale=True) > 0.5 if os.path.exists(mask_path) else None
        frames.append(TargetFrame(
            image=read_png(os.path.join(path, "image.png")),
            landmarks=read_landmarks(os.path.join(path, "landmarks.txt"), 2),
            camera=camera,
            mask=mask,
            matte=matte,
        ))
    logger.info("Loaded dataset %s: %d frame(s).", directory, len(frames))
    return Dataset(directory, model, frames)
