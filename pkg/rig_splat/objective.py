"""Fitting loss terms, their gradients and the weighted total."""
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .const import OPACITY_CLAMP
from .errors import ConfigError, InvalidInputError
from .gaussian_rig import GaussianPrototypes
from .mesh_raster import MeshBuffers
from .splat_renderer import RenderBuffers
from .utils import norm_and_direction

# --- Logger Setup ---
logger = logging.getLogger(__name__)

SCALE_REG_MODES = ("reference", "raw")


@dataclass
class LossWeights:
    w_l1: float = 1.0
    w_lmk: float = 0.005
    w_normals: float = 0.1
    w_depth: float = 0.1
    w_x: float = 0.01
    w_s: float = 0.01
    w_o: float = 0.001
    w_psi: float = 1e-4
    w_beta: float = 1e-4
    w_perc: float = 0.0
    w_id: float = 0.0
    w_exp: float = 0.0

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if not np.isfinite(value) or value < 0:
                raise ConfigError(name, f"loss weights must be finite and nonnegative, got {value}")

    def for_term(self) -> Dict[str, float]:
        """Weight applied to each reported term."""
        return {
            "l1": self.w_l1, "landmarks": self.w_lmk, "normals": self.w_normals, "depth": self.w_depth,
            "offset_reg": self.w_x, "scale_reg": self.w_s, "opacity_reg": self.w_o,
            "psi_reg": self.w_psi, "beta_reg": self.w_beta,
            "perc": self.w_perc, "id": self.w_id, "exp": self.w_exp,
        }


@dataclass
class LossReport:
    iteration: int
    terms: Dict[str, float]
    weights: Dict[str, float]
    total: float
    diagnostics: Dict[str, float] = field(default_factory=dict)

    def to_record(self, wall_time: float) -> Dict[str, object]:
        return {"iteration": self.iteration, "total": self.total, "terms": self.terms,
                "weights": self.weights, "diagnostics": self.diagnostics, "wall_time": wall_time}


class FeatureExtractor(Protocol):
    """Hook for feature-space losses: image in, feature vector out."""

    def features(self, image: np.ndarray) -> np.ndarray:
        ...

    def features_vjp(self, image: np.ndarray, grad_features: np.ndarray) -> np.ndarray:
        ...


def _check_shapes(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if np.shape(a) != np.shape(b):
        raise InvalidInputError(f"{what}: shapes {np.shape(a)} and {np.shape(b)} differ.")


def photometric_l1(target: np.ndarray, rendered: np.ndarray, mask: np.ndarray) -> float:
    """Mean of |target - rendered| weighted by 0.7 inside the face region plus 0.3 everywhere."""
    return photometric_l1_grad(target, rendered, mask)[0]


def photometric_l1_grad(target: np.ndarray, rendered: np.ndarray, mask: np.ndarray) -> Tuple[float, np.ndarray]:
    _check_shapes(target, rendered, "photometric_l1")
    if np.shape(mask) != np.shape(target)[:2]:
        raise InvalidInputError(f"Face mask of shape {np.shape(mask)} does not match image {np.shape(target)}.")
    diff = rendered - target
    weight = (0.7 * np.asarray(mask) + 0.3)[..., None]
    value = float(np.mean(np.abs(diff) * weight))
    return value, np.sign(diff) * weight / diff.size


def landmark_loss(predicted: np.ndarray, valid: np.ndarray, target: np.ndarray,
                  image_size: Tuple[int, int]) -> float:
    return landmark_loss_grad(predicted, valid, target, image_size)[0]


def landmark_loss_grad(predicted: np.ndarray, valid: np.ndarray, target: np.ndarray,
                       image_size: Tuple[int, int]) -> Tuple[float, np.ndarray]:
    """Mean L1 over valid pairs and both coordinates, pixels normalized by (width, height)."""
    _check_shapes(predicted, target, "landmark_loss")
    scale = np.asarray(image_size, dtype=np.float64)
    usable = np.asarray(valid, dtype=bool) & np.all(np.isfinite(target), axis=1) & np.all(np.isfinite(predicted), axis=1)
    grad = np.zeros_like(predicted, dtype=np.float64)
    count = int(np.count_nonzero(usable))
    if count == 0:
        logger.warning("No valid landmark pairs; landmark loss is zero.")
        return 0.0, grad
    diff = (predicted[usable] - target[usable]) / scale
    grad[usable] = np.sign(diff) / scale / (2 * count)
    return float(np.mean(np.abs(diff))), grad


@dataclass
class CouplingResult:
    normals: float
    depth: float
    grad_normal: np.ndarray
    grad_depth: np.ndarray


def coupling_losses(gauss: RenderBuffers, mesh: MeshBuffers, mask: np.ndarray) -> CouplingResult:
    """Masked L1 between splat and mesh normals/depth over face pixels the mesh covers."""
    _check_shapes(gauss.depth, mesh.depth, "coupling_losses")
    _check_shapes(gauss.depth, mask, "coupling_losses mask")
    sel = (np.asarray(mask) > 0.5) & mesh.coverage
    count = int(np.count_nonzero(sel))
    grad_n = np.zeros_like(gauss.normal)
    grad_d = np.zeros_like(gauss.depth)
    if count == 0:
        return CouplingResult(0.0, 0.0, grad_n, grad_d)
    dn = gauss.normal[sel] - mesh.normal[sel]
    dd = gauss.depth[sel] - mesh.depth[sel]
    grad_n[sel] = np.sign(dn) / (3 * count)
    grad_d[sel] = np.sign(dd) / count
    return CouplingResult(float(np.abs(dn).sum() / (3 * count)), float(np.abs(dd).sum() / count), grad_n, grad_d)


def beta_nll(opacity: np.ndarray) -> np.ndarray:
    """Negative log-likelihood of Beta(0.5, 0.5) on the clamped opacity."""
    s = np.clip(opacity, OPACITY_CLAMP, 1.0 - OPACITY_CLAMP)
    return np.log(np.pi) + 0.5 * np.log(s) + 0.5 * np.log1p(-s)


@dataclass
class GaussianRegTerms:
    offset: float
    scale: float
    opacity: float
    grad_offset: np.ndarray
    grad_log_scale: np.ndarray
    grad_opacity_logit: np.ndarray


def gaussian_reg_terms(prototypes: GaussianPrototypes, scale_mode: str = "reference") -> GaussianRegTerms:
    """Unweighted offset-norm, log-scale-norm and Beta NLL sums with their gradients."""
    if scale_mode not in SCALE_REG_MODES:
        raise ConfigError("scale_reg_mode", f"expected one of {SCALE_REG_MODES}, got '{scale_mode}'")
    off_norm, off_dir = norm_and_direction(prototypes.offset)
    excess = prototypes.log_scale - (prototypes.reference_log_scale if scale_mode == "reference" else 0.0)
    sc_norm, sc_dir = norm_and_direction(excess)
    sigma = prototypes.opacity
    inside = (sigma > OPACITY_CLAMP) & (sigma < 1.0 - OPACITY_CLAMP)
    return GaussianRegTerms(
        offset=float(off_norm.sum()),
        scale=float(sc_norm.sum()),
        opacity=float(beta_nll(sigma).sum()),
        grad_offset=off_dir,
        grad_log_scale=sc_dir,
        grad_opacity_logit=np.where(inside, 0.5 - sigma, 0.0),
    )


def gaussian_reg(prototypes: GaussianPrototypes, weights: LossWeights, scale_mode: str = "reference") -> float:
    terms = gaussian_reg_terms(prototypes, scale_mode)
    return weights.w_x * terms.offset + weights.w_s * terms.scale + weights.w_o * terms.opacity


def mmm_reg(beta: np.ndarray, psi: np.ndarray, weights: LossWeights) -> float:
    return weights.w_psi * float(np.linalg.norm(psi)) + weights.w_beta * float(np.linalg.norm(beta))


def feature_loss(extractor: FeatureExtractor, rendered: np.ndarray,
                 target: np.ndarray) -> Tuple[float, Optional[np.ndarray]]:
    """1 - cosine similarity of extractor features; the gradient needs `features_vjp`."""
    raw = np.asarray(extractor.features(rendered), dtype=np.float64)
    a = raw.ravel()
    b = np.asarray(extractor.features(target), dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0, None
    cos = float(a @ b) / (na * nb)
    vjp = getattr(extractor, "features_vjp", None)
    if vjp is None:
        return 1.0 - cos, None
    grad_feat = -(b / (na * nb) - cos * a / na ** 2)
    return 1.0 - cos, np.asarray(vjp(rendered, grad_feat.reshape(raw.shape)))


@dataclass
class FrameObservation:
    """Everything the per-frame image terms compare."""
    target: np.ndarray
    rendered: RenderBuffers
    mask: np.ndarray
    landmarks: np.ndarray
    landmark_valid: np.ndarray
    target_landmarks: np.ndarray
    mesh: Optional[MeshBuffers] = None


@dataclass
class FrameLossGradients:
    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    landmarks: np.ndarray
    mesh_depth: Optional[np.ndarray] = None
    mesh_normal: Optional[np.ndarray] = None


@dataclass
class LossGradients:
    frames: List[FrameLossGradients]
    offset: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    beta: np.ndarray
    psi: np.ndarray


def total_loss(frames: Sequence[FrameObservation], prototypes: GaussianPrototypes, beta: np.ndarray,
               psi: np.ndarray, weights: LossWeights, scale_mode: str = "reference",
               extractors: Optional[Dict[str, FeatureExtractor]] = None,
               iteration: int = 0) -> Tuple[LossReport, LossGradients]:
    """Weighted sum of every term; image terms are frame means, regularizers are applied once.

    `psi` holds one expression code per frame (shape (n_frames, K)); its regularizer is the
    frame mean of the code norms.
    """
    if not frames:
        raise InvalidInputError("total_loss needs at least one frame.")
    psi = np.atleast_2d(np.asarray(psi, dtype=np.float64))
    if len(psi) != len(frames):
        raise InvalidInputError(f"Got {len(psi)} expression codes for {len(frames)} frames.")
    extractors = extractors or {}
    w = weights.for_term()
    inv = 1.0 / len(frames)
    sums = dict.fromkeys(("l1", "landmarks", "normals", "depth", "perc", "id", "exp"), 0.0)
    frame_grads = []
    for obs in frames:
        h, wd = obs.target.shape[:2]
        l1, g_color = photometric_l1_grad(obs.target, obs.rendered.color, obs.mask)
        lmk, g_lmk = landmark_loss_grad(obs.landmarks, obs.landmark_valid, obs.target_landmarks, (wd, h))
        sums["l1"] += l1 * inv
        sums["landmarks"] += lmk * inv
        fg = FrameLossGradients(color=w["l1"] * inv * g_color, depth=np.zeros((h, wd)),
                                normal=np.zeros((h, wd, 3)), landmarks=w["landmarks"] * inv * g_lmk)
        if obs.mesh is not None:
            coupling = coupling_losses(obs.rendered, obs.mesh, obs.mask)
            sums["normals"] += coupling.normals * inv
            sums["depth"] += coupling.depth * inv
            fg.normal = w["normals"] * inv * coupling.grad_normal
            fg.depth = w["depth"] * inv * coupling.grad_depth
            fg.mesh_normal = -fg.normal
            fg.mesh_depth = -fg.depth
        for name, extractor in extractors.items():
            if name not in ("perc", "id", "exp"):
                raise ConfigError("extractors", f"unknown feature loss '{name}'")
            value, g_img = feature_loss(extractor, obs.rendered.color, obs.target)
            sums[name] += value * inv
            if g_img is not None:
                fg.color = fg.color + w[name] * inv * g_img
        frame_grads.append(fg)

    reg = gaussian_reg_terms(prototypes, scale_mode)
    psi_norms, psi_dirs = norm_and_direction(psi)
    beta_norm, beta_dir = norm_and_direction(np.asarray(beta, dtype=np.float64))
    terms = dict(sums)
    terms.update({
        "offset_reg": reg.offset,
        "scale_reg": reg.scale,
        "opacity_reg": reg.opacity,
        "psi_reg": float(psi_norms.mean()),
        "beta_reg": float(beta_norm),
    })
    total = float(sum(w[name] * value for name, value in terms.items()))
    report = LossReport(iteration=iteration, terms=terms, weights=w, total=total)
    grads = LossGradients(
        frames=frame_grads,
        offset=w["offset_reg"] * reg.grad_offset,
        log_scale=w["scale_reg"] * reg.grad_log_scale,
        opacity_logit=w["opacity_reg"] * reg.grad_opacity_logit,
        beta=w["beta_reg"] * beta_dir,
        psi=w["psi_reg"] * psi_dirs / len(psi),
    )
    return report, grads
