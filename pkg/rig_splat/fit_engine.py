"""Analysis-by-synthesis fitting: render, compare, backpropagate, Adam, densify."""
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .blendshape_model import (
    BlendshapeModel,
    Pose,
    face_adjacency,
    landmarks_3d,
    landmarks_3d_backward,
    pose_mesh,
    pose_mesh_backward,
    triangle_frames,
    triangle_frames_backward,
)
from .const import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    DEFAULT_FOV_DEG,
    DEFAULT_ITERATIONS,
    DEFAULT_LR,
    DEFAULT_N_PRUNE,
    DEFAULT_NOISE_SCALE,
    DEFAULT_RESOLUTION,
    DEFAULT_T_DENSIFY,
    DEFAULT_T_HISTORY,
)
from .errors import ConfigError, InvalidInputError, NumericalAbortError
from .gaussian_rig import (
    DensifyStats,
    GaussianPrototypes,
    PrototypeGradients,
    bind_splats,
    bind_splats_backward,
    densify_and_prune,
    init_prototypes,
    splat_adjacency,
    update_stats,
)
from .mesh_raster import (
    MeshBuffers,
    project_points,
    project_points_jacobian,
    rasterize_mesh,
    rasterize_mesh_backward,
)
from .objective import (
    SCALE_REG_MODES,
    FeatureExtractor,
    FrameObservation,
    LossReport,
    LossWeights,
    total_loss,
)
from .shading import LightingPrior, lighting_coeffs, lighting_coeffs_backward, shade, shade_backward, synthetic_prior
from .splat_renderer import BufferGradients, Camera, RenderBuffers, render, render_backward
from .utils import normalize_quat_backward, rng_stream

# --- Logger Setup ---
logger = logging.getLogger(__name__)

PARAM_GROUPS: Dict[str, Tuple[str, ...]] = {
    "splats": GaussianPrototypes.PARAMETERS,
    "shape": ("beta",),
    "expression": ("psi",),
    "pose": ("global_rotation", "global_translation", "neck_rotation"),
    "lighting": ("lighting",),
}
GROUP_OF = {name: group for group, names in PARAM_GROUPS.items() for name in names}

# head framing: half-height of the view volume kept around the model, and its vertical centre
FRAMING_HALF_EXTENT = 0.16
FRAMING_HEAD_OFFSET = 0.02


def framing_translation(fov_deg: float = DEFAULT_FOV_DEG) -> np.ndarray:
    """Head translation that frames the bundled model for a camera at the origin."""
    return np.array([0.0, FRAMING_HEAD_OFFSET, FRAMING_HALF_EXTENT / np.tan(np.radians(fov_deg) / 2.0)])


@dataclass
class FitConfig:
    iterations: int = DEFAULT_ITERATIONS
    resolution: int = DEFAULT_RESOLUTION
    fov_deg: float = DEFAULT_FOV_DEG
    lr_splats: float = DEFAULT_LR
    lr_shape: float = DEFAULT_LR
    lr_expression: float = DEFAULT_LR
    lr_pose: float = DEFAULT_LR
    lr_lighting: float = DEFAULT_LR
    t_densify: int = DEFAULT_T_DENSIFY
    t_history: int = DEFAULT_T_HISTORY
    n_prune: int = DEFAULT_N_PRUNE
    n_densify: int = DEFAULT_N_PRUNE
    noise_scale: float = DEFAULT_NOISE_SCALE
    weights: LossWeights = field(default_factory=LossWeights)
    scale_reg_mode: str = "reference"
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    random_background: bool = True
    coupling_to_mesh: bool = False
    adjacency_degree: int = 2
    snapshot_every: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        for name in ("iterations", "t_densify", "n_prune", "n_densify", "snapshot_every"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(name, "must be nonnegative")
        if self.t_history < 1:
            raise ConfigError("t_history", "must be at least 1")
        if self.resolution < 16:
            raise ConfigError("resolution", f"must be at least 16, got {self.resolution}")
        if not 0.0 < self.fov_deg < 180.0:
            raise ConfigError("fov_deg", "must lie in (0, 180)")
        for group in PARAM_GROUPS:
            lr = getattr(self, f"lr_{group}")
            if not np.isfinite(lr) or lr < 0:
                raise ConfigError(f"lr_{group}", "learning rates must be finite and nonnegative (0 freezes the group)")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale", "must be nonnegative")
        if self.scale_reg_mode not in SCALE_REG_MODES:
            raise ConfigError("scale_reg_mode", f"expected one of {SCALE_REG_MODES}")
        if len(self.background) != 3:
            raise ConfigError("background", "needs three channels")
        if self.adjacency_degree < 1:
            raise ConfigError("adjacency_degree", "must be at least 1")
        self.background = tuple(float(c) for c in self.background)

    def learning_rates(self) -> Dict[str, float]:
        return {group: float(getattr(self, f"lr_{group}")) for group in PARAM_GROUPS}

    def to_dict(self) -> Dict[str, object]:
        data = asdict(self)
        data["background"] = list(self.background)
        return data


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, lr: float, t: int,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam update; returns (param, m, v)."""
    if not (np.shape(param) == np.shape(grad) == np.shape(m) == np.shape(v)):
        raise InvalidInputError("adam_step: parameter, gradient and moment shapes differ.")
    if t < 1:
        raise InvalidInputError("adam_step: step count starts at 1.")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Adam over named parameters grouped by learning rate; a group with lr 0 is never touched."""

    def __init__(self, learning_rates: Dict[str, float], beta1: float = ADAM_BETA1,
                 beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> None:
        self.learning_rates = dict(learning_rates)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, param in params.items():
            lr = self.learning_rates[GROUP_OF[name]]
            if lr == 0.0:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(param)
                self.v[name] = np.zeros_like(param)
            new, self.m[name], self.v[name] = adam_step(param, grads[name], self.m[name], self.v[name], lr,
                                                        self.t, self.beta1, self.beta2, self.eps)
            param[...] = new

    def reindex(self, names: Sequence[str], index_map: np.ndarray, is_clone: np.ndarray) -> None:
        """Carries per-row moments across a densify event; clones start from zero."""
        for name in names:
            for store in (self.m, self.v):
                if name in store:
                    moved = store[name][index_map]
                    moved[is_clone] = 0.0
                    store[name] = moved


@dataclass
class FitState:
    beta: np.ndarray
    psi: np.ndarray
    global_rotation: np.ndarray
    global_translation: np.ndarray
    neck_rotation: np.ndarray
    lighting: np.ndarray
    prototypes: GaussianPrototypes
    optimizer: Adam
    stats: DensifyStats
    iteration: int = 0
    seed: int = 0

    @property
    def n_frames(self) -> int:
        return len(self.psi)

    def pose(self, frame: int) -> Pose:
        return Pose.from_raw(self.global_rotation[frame], self.global_translation[frame], self.neck_rotation[frame])

    def params(self) -> Dict[str, np.ndarray]:
        """Live views of every optimized array keyed by parameter name."""
        out = {name: getattr(self.prototypes, name) for name in GaussianPrototypes.PARAMETERS}
        for name in ("beta", "psi", "global_rotation", "global_translation", "neck_rotation", "lighting"):
            out[name] = getattr(self, name)
        return out


def init_state(model: BlendshapeModel, n_frames: int, config: FitConfig,
               prior: Optional[LightingPrior] = None) -> FitState:
    """Zero codes, identity rotations at the framing distance, prior-mean lighting, one splat per face."""
    prior = prior or synthetic_prior()
    rotation = np.tile([1.0, 0.0, 0.0, 0.0], (n_frames, 1))
    return FitState(
        beta=np.zeros(model.n_shape),
        psi=np.zeros((n_frames, model.n_expr)),
        global_rotation=rotation.copy(),
        global_translation=np.tile(framing_translation(config.fov_deg), (n_frames, 1)),
        neck_rotation=rotation.copy(),
        lighting=np.zeros(prior.n_components),
        prototypes=init_prototypes(model),
        optimizer=Adam(config.learning_rates()),
        stats=DensifyStats(model.n_faces, config.t_history),
        seed=config.seed,
    )


@dataclass
class TargetFrame:
    """One observation: premultiplied image, 2D landmarks (pixels), camera, optional mask and matte."""
    image: np.ndarray
    landmarks: np.ndarray
    camera: Camera
    mask: Optional[np.ndarray] = None
    matte: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        shape = (self.camera.height, self.camera.width)
        if np.shape(self.image) != shape + (3,):
            raise InvalidInputError(f"Target image has shape {np.shape(self.image)}, camera expects {shape + (3,)}.")
        for name in ("mask", "matte"):
            value = getattr(self, name)
            if value is not None and np.shape(value) != shape:
                raise InvalidInputError(f"Target {name} has shape {np.shape(value)}, expected {shape}.")


class _FrameWork(NamedTuple):
    pose: Pose
    vertices: np.ndarray
    frames: object
    splats: object
    colors: np.ndarray
    background: np.ndarray
    buffers: RenderBuffers
    mesh: Optional[MeshBuffers]
    landmarks: np.ndarray


@dataclass
class FitResult:
    state: FitState
    reports: List[LossReport]
    renders: List[RenderBuffers]
    vertices: List[np.ndarray]
    landmarks: List[np.ndarray]


class Fitter:
    """Owns the per-iteration forward/backward over all frames for one model and prior."""

    def __init__(self, frames: Sequence[TargetFrame], model: BlendshapeModel, config: FitConfig,
                 prior: Optional[LightingPrior] = None, threads: Optional[int] = None,
                 extractors: Optional[Dict[str, FeatureExtractor]] = None) -> None:
        if not frames:
            raise InvalidInputError("Fitting needs at least one target frame.")
        for frame in frames:
            if frame.camera.width != frame.camera.height or frame.camera.height != config.resolution:
                raise InvalidInputError(
                    f"Target frames must be square at the configured resolution {config.resolution}, "
                    f"got {frame.camera.width}x{frame.camera.height}.")
            if len(frame.landmarks) != model.n_landmarks:
                raise InvalidInputError(
                    f"Target has {len(frame.landmarks)} landmarks, model defines {model.n_landmarks}.")
        self.frames = list(frames)
        self.model = model
        self.config = config
        self.prior = prior or synthetic_prior()
        self.threads = threads
        self.extractors = extractors
        weights = config.weights
        self.use_coupling = weights.w_normals > 0 or weights.w_depth > 0
        self.face_adj = face_adjacency(model.faces, config.adjacency_degree, model.n_vertices)

    def _backgrounds(self, iteration: int) -> List[np.ndarray]:
        rng = rng_stream(self.config.seed, f"fit.background/{iteration}")
        fixed = np.asarray(self.config.background)
        out = []
        for frame in self.frames:
            if self.config.random_background and frame.matte is not None:
                out.append(rng.random(3))
            else:
                out.append(fixed)
        return out

    def forward_frame(self, state: FitState, index: int, background: np.ndarray,
                      light: np.ndarray, need_mesh: bool) -> _FrameWork:
        frame = self.frames[index]
        pose = state.pose(index)
        vertices = pose_mesh(self.model, state.beta, state.psi[index], pose)
        frames = triangle_frames(vertices, self.model.faces)
        splats = bind_splats(state.prototypes, frames)
        colors = shade(splats.albedo, splats.normal, light)
        buffers = render(splats, frame.camera, background, colors, self.threads)
        mesh = None
        if need_mesh:
            mesh = rasterize_mesh(vertices, self.model.faces, self.model.face_region, frame.camera, self.threads)
        return _FrameWork(pose, vertices, frames, splats, colors, background, buffers, mesh,
                          landmarks_3d(vertices, self.model))

    def evaluate(self, state: FitState, iteration: int,
                 backgrounds: List[np.ndarray]) -> Tuple[LossReport, Dict[str, np.ndarray], np.ndarray, List[_FrameWork]]:
        """Loss report, gradients keyed by parameter name, and per-prototype world-centre gradients."""
        light = lighting_coeffs(self.prior, state.lighting)
        work, observations = [], []
        invalid_landmarks = 0
        for i, frame in enumerate(self.frames):
            need_mesh = self.use_coupling or frame.mask is None
            fw = self.forward_frame(state, i, backgrounds[i], light, need_mesh)
            target = frame.image
            if frame.matte is not None:
                target = target + (1.0 - frame.matte)[..., None] * backgrounds[i]
            pixels, valid = project_points(fw.landmarks, frame.camera)
            invalid_landmarks += int(np.count_nonzero(~valid))
            mask = frame.mask if frame.mask is not None else fw.mesh.face_mask
            observations.append(FrameObservation(target, fw.buffers, mask, pixels, valid, frame.landmarks,
                                                 fw.mesh if self.use_coupling else None))
            work.append(fw)

        report, loss_grads = total_loss(observations, state.prototypes, state.beta, state.psi,
                                        self.config.weights, self.config.scale_reg_mode, self.extractors,
                                        iteration)
        report.diagnostics = {
            "splats": len(state.prototypes),
            "skipped_splats": sum(fw.splats.skipped for fw in work),
            "degenerate_triangles": sum(fw.frames.degenerate_count for fw in work),
            "invalid_landmarks": invalid_landmarks,
        }
        for name, value in report.terms.items():
            if not np.isfinite(value):
                raise NumericalAbortError(name, iteration)
        if not np.isfinite(report.total):
            raise NumericalAbortError("total", iteration)

        n_protos = len(state.prototypes)
        proto_grads = PrototypeGradients.zeros(n_protos)
        proto_grads.offset += loss_grads.offset
        proto_grads.log_scale += loss_grads.log_scale
        proto_grads.opacity_logit += loss_grads.opacity_logit
        grads = {
            "beta": loss_grads.beta.copy(),
            "psi": loss_grads.psi.copy(),
            "global_rotation": np.zeros_like(state.global_rotation),
            "global_translation": np.zeros_like(state.global_translation),
            "neck_rotation": np.zeros_like(state.neck_rotation),
            "lighting": np.zeros_like(state.lighting),
        }
        positional = np.zeros((n_protos, 3))
        for i, (fw, fg) in enumerate(zip(work, loss_grads.frames)):
            self._backward_frame(state, i, fw, fg, light, proto_grads, grads, positional)
        for name in GaussianPrototypes.PARAMETERS:
            grads[name] = getattr(proto_grads, name)
        for name, value in grads.items():
            if not np.all(np.isfinite(value)):
                raise NumericalAbortError(f"grad:{name}", iteration)
        return report, grads, positional, work

    def _backward_frame(self, state: FitState, index: int, fw: _FrameWork, fg, light: np.ndarray,
                        proto_grads: PrototypeGradients, grads: Dict[str, np.ndarray],
                        positional: np.ndarray) -> None:
        frame = self.frames[index]
        model = self.model
        sg = render_backward(fw.splats, frame.camera,
                             BufferGradients(color=fg.color, depth=fg.depth, normal=fg.normal),
                             fw.background, fw.colors, self.threads)
        g_albedo, g_normal, g_light = shade_backward(fw.splats.albedo, fw.splats.normal, light, sg.color)
        sg.rotation[:, :, 2] += g_normal
        positional[fw.splats.source] += sg.center
        pg, frame_grads = bind_splats_backward(state.prototypes, fw.frames, fw.splats, sg, g_albedo)
        proto_grads += pg
        grads["lighting"] += lighting_coeffs_backward(self.prior, g_light)

        g_vertices = triangle_frames_backward(fw.vertices, model.faces, fw.frames, frame_grads.rotation,
                                              frame_grads.scale, frame_grads.centroid)
        jac = project_points_jacobian(fw.landmarks, frame.camera)
        g_vertices += landmarks_3d_backward(model, np.einsum("lc,lcd->ld", fg.landmarks, jac))
        if self.config.coupling_to_mesh and fw.mesh is not None and fg.mesh_depth is not None:
            g_vertices += rasterize_mesh_backward(fw.vertices, model.faces, frame.camera, fw.mesh,
                                                  fg.mesh_depth, fg.mesh_normal)
        pose_grads = pose_mesh_backward(model, state.beta, state.psi[index], fw.pose, g_vertices)
        grads["beta"] += pose_grads.beta
        grads["psi"][index] += pose_grads.psi
        grads["global_rotation"][index] += normalize_quat_backward(state.global_rotation[index],
                                                                   pose_grads.global_rotation)
        grads["global_translation"][index] += pose_grads.global_translation
        grads["neck_rotation"][index] += normalize_quat_backward(state.neck_rotation[index],
                                                                 pose_grads.neck_rotation)

    def step(self, state: FitState) -> LossReport:
        """One full iteration: evaluate, update statistics, Adam, optional densify event."""
        iteration = state.iteration + 1
        report, grads, positional, work = self.evaluate(state, iteration, self._backgrounds(iteration))
        update_stats(state.stats, state.prototypes.opacity, positional)
        state.optimizer.step(state.params(), grads)
        np.clip(state.prototypes.albedo, 0.0, 1.0, out=state.prototypes.albedo)
        state.iteration = iteration
        self.last_work = work

        cfg = self.config
        if cfg.t_densify and iteration % cfg.t_densify == 0:
            if not self.has_signal(state):
                logger.info("Iteration %d: no gradient signal, densify event skipped.", iteration)
                return report
            result = densify_and_prune(state.prototypes, state.stats, cfg.n_prune, cfg.n_densify,
                                       cfg.noise_scale, rng_stream(cfg.seed, f"fit.densify/{iteration}"))
            state.prototypes = result.prototypes
            state.optimizer.reindex(GaussianPrototypes.PARAMETERS, result.index_map, result.is_clone)
            report.diagnostics.update(result.to_dict())
            counts = state.stats.face_counts
            report.diagnostics["face_count_range"] = [int(counts.min()), int(counts.max())]
            report.diagnostics["mean_neighbours"] = self.mean_neighbours(state.prototypes)
        return report

    def has_signal(self, state: FitState) -> bool:
        """False when every loss weight is zero or the gradient window holds only zeros."""
        if not any(self.config.weights.for_term().values()):
            return False
        return any(np.any(window) for window in state.stats.grad_window)

    def mean_neighbours(self, prototypes: GaussianPrototypes) -> float:
        return float(splat_adjacency(prototypes.parent_face, self.face_adj).sum(axis=1).mean())

    def final_outputs(self, state: FitState) -> Tuple[List[RenderBuffers], List[np.ndarray], List[np.ndarray]]:
        """Renders every frame over the fixed background."""
        light = lighting_coeffs(self.prior, state.lighting)
        background = np.asarray(self.config.background)
        work = [self.forward_frame(state, i, background, light, False) for i in range(len(self.frames))]
        return [fw.buffers for fw in work], [fw.vertices for fw in work], [fw.landmarks for fw in work]


def fit(frames: Sequence[TargetFrame], model: BlendshapeModel, config: FitConfig,
        prior: Optional[LightingPrior] = None, state: Optional[FitState] = None,
        on_report: Optional[Callable[[LossReport, float], None]] = None,
        on_snapshot: Optional[Callable[[int, RenderBuffers], None]] = None,
        threads: Optional[int] = None,
        extractors: Optional[Dict[str, FeatureExtractor]] = None) -> FitResult:
    """Runs config.iterations optimizer steps (resuming from `state` when given)."""
    prior = prior or synthetic_prior()
    fitter = Fitter(frames, model, config, prior, threads, extractors)
    if state is None:
        state = init_state(model, len(frames), config, prior)
    elif state.n_frames != len(frames):
        raise InvalidInputError(f"Checkpoint holds {state.n_frames} frames, dataset has {len(frames)}.")
    state.optimizer.learning_rates = config.learning_rates()
    logger.info("Fitting %d frames, %d prototypes, iterations %d..%d.",
                len(frames), len(state.prototypes), state.iteration, config.iterations)
    logger.info("Mean splat neighbourhood size: %.2f.", fitter.mean_neighbours(state.prototypes))

    start = time.monotonic()
    reports = []
    while state.iteration < config.iterations:
        report = fitter.step(state)
        reports.append(report)
        if on_report is not None:
            on_report(report, time.monotonic() - start)
        if report.iteration % 50 == 0 or report.iteration == config.iterations:
            logger.info("Iteration %d: total %.6f, l1 %.6f.", report.iteration, report.total, report.terms["l1"])
        if on_snapshot is not None and config.snapshot_every and report.iteration % config.snapshot_every == 0:
            on_snapshot(report.iteration, fitter.last_work[0].buffers)

    renders, vertices, landmarks = fitter.final_outputs(state)
    return FitResult(state, reports, renders, vertices, landmarks)
