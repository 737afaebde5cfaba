"""Triangle-bound Gaussian prototypes: binding, statistics and densification."""
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Optional, Tuple

import numpy as np

from .blendshape_model import BlendshapeModel, TriangleFrames, triangle_frames
from .const import (
    MAX_SPLATS_PER_FACE,
    MIN_SPLATS_PER_FACE,
    PROTOTYPE_MAGIC,
    PROTOTYPE_VERSION,
)
from .errors import CheckpointError, InvalidInputError, MissingInputError
from .utils import normalize_quat, normalize_quat_backward, quat_to_matrix, quat_to_matrix_backward

# --- Logger Setup ---
logger = logging.getLogger(__name__)

# 13 parameter floats (offset 3, rotation 4, log-scale 2, opacity logit 1, albedo 3) + parent index.
PROTOTYPE_RECORD = np.dtype([("params", "<f8", (13,)), ("parent", "<i4")])
PROTOTYPE_HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("count", "<u4")])


@dataclass
class GaussianPrototype:
    parent_face: int
    offset: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    albedo: np.ndarray


@dataclass
class GaussianPrototypes:
    """Structure-of-arrays prototype store; rotations are raw quaternions normalized at use."""
    parent_face: np.ndarray
    offset: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    albedo: np.ndarray
    reference_log_scale: Optional[np.ndarray] = None

    PARAMETERS = ("offset", "rotation", "log_scale", "opacity_logit", "albedo")

    def __post_init__(self) -> None:
        self.parent_face = np.asarray(self.parent_face, dtype=np.int64)
        n = len(self.parent_face)
        for name, width in (("offset", 3), ("rotation", 4), ("log_scale", 2), ("albedo", 3)):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (n, width):
                raise InvalidInputError(f"Prototype field '{name}' has shape {arr.shape}, expected ({n}, {width}).")
            setattr(self, name, arr)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64)
        if self.opacity_logit.shape != (n,):
            raise InvalidInputError("Prototype field 'opacity_logit' needs one value per prototype.")
        if self.reference_log_scale is None:
            self.reference_log_scale = self.log_scale.copy()
        self.reference_log_scale = np.asarray(self.reference_log_scale, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.parent_face)

    def __getitem__(self, index: int) -> GaussianPrototype:
        return GaussianPrototype(int(self.parent_face[index]), self.offset[index],
                                 normalize_quat(self.rotation[index]), self.log_scale[index],
                                 float(self.opacity_logit[index]), self.albedo[index])

    @property
    def opacity(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logit))

    def take(self, index: np.ndarray) -> "GaussianPrototypes":
        return GaussianPrototypes(
            self.parent_face[index], self.offset[index], self.rotation[index], self.log_scale[index],
            self.opacity_logit[index], self.albedo[index], self.reference_log_scale[index],
        )

    def copy(self) -> "GaussianPrototypes":
        return self.take(np.arange(len(self)))

    def face_counts(self, n_faces: int) -> np.ndarray:
        return np.bincount(self.parent_face, minlength=n_faces)


@dataclass
class WorldSplat:
    center: np.ndarray
    rotation: np.ndarray
    scales: np.ndarray
    opacity: float
    albedo: np.ndarray


@dataclass
class WorldSplats:
    """Bound splats in world space; `source` maps each splat back to its prototype row."""
    center: np.ndarray
    rotation: np.ndarray
    scales: np.ndarray
    opacity: np.ndarray
    albedo: np.ndarray
    source: np.ndarray = None
    skipped: int = 0

    def __post_init__(self) -> None:
        if self.source is None:
            self.source = np.arange(len(self.center))

    def __len__(self) -> int:
        return len(self.center)

    def __getitem__(self, index: int) -> WorldSplat:
        return WorldSplat(self.center[index], self.rotation[index], self.scales[index],
                          float(self.opacity[index]), self.albedo[index])

    @property
    def normal(self) -> np.ndarray:
        return self.rotation[:, :, 2]

    @classmethod
    def empty(cls) -> "WorldSplats":
        return cls(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)))


@dataclass
class SplatGradients:
    """Gradients on world splat fields, one row per bound splat."""
    center: np.ndarray
    rotation: np.ndarray
    scales: np.ndarray
    opacity: np.ndarray
    color: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "SplatGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 3, 3)), np.zeros((n, 2)), np.zeros(n), np.zeros((n, 3)))


@dataclass
class PrototypeGradients:
    offset: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    albedo: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "PrototypeGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 2)), np.zeros(n), np.zeros((n, 3)))

    def __iadd__(self, other: "PrototypeGradients") -> "PrototypeGradients":
        for name in GaussianPrototypes.PARAMETERS:
            getattr(self, name).__iadd__(getattr(other, name))
        return self


@dataclass
class FrameGradients:
    rotation: np.ndarray
    scale: np.ndarray
    centroid: np.ndarray


def init_prototypes(model: BlendshapeModel, vertices: Optional[np.ndarray] = None) -> GaussianPrototypes:
    """One prototype per face at the centroid, world radius about half the mean edge length."""
    vertices = model.base_vertices if vertices is None else vertices
    frames = triangle_frames(vertices, model.faces)
    corners = vertices[model.faces]
    edges = np.linalg.norm(corners - np.roll(corners, 1, axis=1), axis=2).mean(axis=1)
    target = np.maximum(0.5 * edges, 1e-6)
    log_scale = np.log(target[:, None] / frames.scale[:, :2])
    n = model.n_faces
    rotation = np.zeros((n, 4))
    rotation[:, 0] = 1.0
    logger.debug("Initialized %d prototypes.", n)
    return GaussianPrototypes(
        parent_face=np.arange(n),
        offset=np.zeros((n, 3)),
        rotation=rotation,
        log_scale=log_scale,
        opacity_logit=np.zeros(n),
        albedo=np.full((n, 3), 0.5),
    )


def bind_splats(prototypes: GaussianPrototypes, frames: TriangleFrames) -> WorldSplats:
    """Places prototypes in world space through their parent triangle frames."""
    if len(prototypes) and prototypes.parent_face.max() >= len(frames):
        raise InvalidInputError("Prototype parent face out of range of the frame list.")
    keep = np.flatnonzero(frames.valid[prototypes.parent_face])
    skipped = len(prototypes) - len(keep)
    if skipped:
        logger.debug("Skipped %d splats on invalid parent frames.", skipped)
    parent = prototypes.parent_face[keep]
    r_p = frames.rotation[parent]
    s_p = frames.scale[parent]
    r_c = quat_to_matrix(normalize_quat(prototypes.rotation[keep]))
    center = np.einsum("nij,nj->ni", r_p, s_p * prototypes.offset[keep]) + frames.centroid[parent]
    return WorldSplats(
        center=center,
        rotation=r_p @ r_c,
        scales=s_p[:, :2] * np.exp(prototypes.log_scale[keep]),
        opacity=prototypes.opacity[keep],
        albedo=prototypes.albedo[keep],
        source=keep,
        skipped=skipped,
    )


def bind_splats_backward(prototypes: GaussianPrototypes, frames: TriangleFrames, splats: WorldSplats,
                         grads: SplatGradients,
                         grad_albedo: Optional[np.ndarray] = None) -> Tuple[PrototypeGradients, FrameGradients]:
    """Pulls world splat gradients back to prototype parameters and parent frames."""
    keep = splats.source
    parent = prototypes.parent_face[keep]
    r_p = frames.rotation[parent]
    s_p = frames.scale[parent]
    q_raw = prototypes.rotation[keep]
    q_unit = normalize_quat(q_raw)
    r_c = quat_to_matrix(q_unit)
    offset = prototypes.offset[keep]
    scaled_offset = s_p * offset

    g_rp = grads.rotation @ np.transpose(r_c, (0, 2, 1)) + np.einsum("ni,nj->nij", grads.center, scaled_offset)
    g_rc = np.transpose(r_p, (0, 2, 1)) @ grads.rotation
    local = np.einsum("nji,nj->ni", r_p, grads.center)
    g_sp = offset * local
    exp_ls = np.exp(prototypes.log_scale[keep])
    g_sp[:, :2] += grads.scales * exp_ls
    sigma = splats.opacity

    out = PrototypeGradients.zeros(len(prototypes))
    out.offset[keep] = s_p * local
    out.rotation[keep] = normalize_quat_backward(q_raw, quat_to_matrix_backward(q_unit, g_rc))
    out.log_scale[keep] = grads.scales * splats.scales
    out.opacity_logit[keep] = grads.opacity * sigma * (1.0 - sigma)
    if grad_albedo is not None:
        out.albedo[keep] = grad_albedo

    n_faces = len(frames)
    frame_grads = FrameGradients(np.zeros((n_faces, 3, 3)), np.zeros((n_faces, 3)), np.zeros((n_faces, 3)))
    np.add.at(frame_grads.rotation, parent, g_rp)
    np.add.at(frame_grads.scale, parent, g_sp)
    np.add.at(frame_grads.centroid, parent, grads.center)
    return out, frame_grads


def splat_adjacency(parent_faces: np.ndarray, face_adj: np.ndarray) -> np.ndarray:
    """Lifts face adjacency to prototypes: two splats are neighbours when their faces are."""
    parent_faces = np.asarray(parent_faces, dtype=np.int64)
    return face_adj[np.ix_(parent_faces, parent_faces)]


@dataclass
class DensifyStats:
    """Sliding windows of per-prototype opacity and world-centre gradient magnitude."""
    n_faces: int
    t_history: int
    opacity_window: Deque[np.ndarray] = field(default_factory=deque)
    grad_window: Deque[np.ndarray] = field(default_factory=deque)
    face_counts: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.t_history < 1:
            raise InvalidInputError("Statistics window must hold at least one iteration.")
        self.opacity_window = deque(self.opacity_window, maxlen=self.t_history)
        self.grad_window = deque(self.grad_window, maxlen=self.t_history)

    @property
    def n_prototypes(self) -> Optional[int]:
        return len(self.opacity_window[0]) if self.opacity_window else None

    def mean_opacity(self, n: int) -> np.ndarray:
        return np.mean(self.opacity_window, axis=0) if self.opacity_window else np.zeros(n)

    def mean_grad(self, n: int) -> np.ndarray:
        return np.mean(self.grad_window, axis=0) if self.grad_window else np.zeros(n)

    def reindex(self, index_map: np.ndarray) -> None:
        self.opacity_window = deque((w[index_map] for w in self.opacity_window), maxlen=self.t_history)
        self.grad_window = deque((w[index_map] for w in self.grad_window), maxlen=self.t_history)


def update_stats(stats: DensifyStats, opacities: np.ndarray, positional_grads: np.ndarray) -> DensifyStats:
    """Advances the windows with this iteration's opacities and gradient magnitudes."""
    opacities = np.asarray(opacities, dtype=np.float64)
    positional_grads = np.asarray(positional_grads, dtype=np.float64)
    if positional_grads.shape != (len(opacities), 3):
        raise InvalidInputError(
            f"Got {len(opacities)} opacities but positional gradients of shape {positional_grads.shape}.")
    if stats.n_prototypes is not None and stats.n_prototypes != len(opacities):
        raise InvalidInputError(
            f"Statistics track {stats.n_prototypes} prototypes, got {len(opacities)}.")
    stats.opacity_window.append(opacities.copy())
    stats.grad_window.append(np.linalg.norm(positional_grads, axis=1))
    return stats


@dataclass
class DensifyReport:
    prototypes: GaussianPrototypes
    index_map: np.ndarray
    is_clone: np.ndarray
    pruned: int
    cloned: int
    prune_deficit: int
    clone_deficit: int

    @property
    def count_delta(self) -> int:
        return self.cloned - self.pruned

    def to_dict(self) -> dict:
        return {
            "pruned": self.pruned,
            "cloned": self.cloned,
            "prune_deficit": self.prune_deficit,
            "clone_deficit": self.clone_deficit,
            "count": len(self.prototypes),
        }


def densify_and_prune(prototypes: GaussianPrototypes, stats: DensifyStats, n_prune: int, n_densify: int,
                      noise_scale: float, rng: np.random.Generator) -> DensifyReport:
    """Prunes the least opaque and clones the highest-gradient prototypes within the per-face bounds."""
    n = len(prototypes)
    if n == 0:
        raise InvalidInputError("Cannot densify an empty prototype list.")
    if n_prune < 0 or n_densify < 0:
        raise InvalidInputError("Prune and densify counts must be nonnegative.")
    parent = prototypes.parent_face
    counts = prototypes.face_counts(stats.n_faces)

    removed = np.zeros(n, dtype=bool)
    n_removed = 0
    for idx in np.argsort(stats.mean_opacity(n), kind="stable"):
        if n_removed == n_prune:
            break
        if counts[parent[idx]] > MIN_SPLATS_PER_FACE:
            removed[idx] = True
            counts[parent[idx]] -= 1
            n_removed += 1

    survivors = np.flatnonzero(~removed)
    grad = stats.mean_grad(n)
    sources = []
    for idx in survivors[np.argsort(-grad[survivors], kind="stable")]:
        if len(sources) == n_densify:
            break
        if counts[parent[idx]] < MAX_SPLATS_PER_FACE:
            sources.append(idx)
            counts[parent[idx]] += 1
    sources = np.asarray(sources, dtype=np.int64)

    index_map = np.concatenate([survivors, sources])
    updated = prototypes.take(index_map)
    n_clones = len(sources)
    if n_clones:
        noise = rng.normal(0.0, noise_scale, size=(n_clones, 5))
        updated.offset[len(survivors):] += noise[:, :3]
        updated.log_scale[len(survivors):] += noise[:, 3:]
    is_clone = np.zeros(len(index_map), dtype=bool)
    is_clone[len(survivors):] = True

    stats.reindex(index_map)
    stats.face_counts = updated.face_counts(stats.n_faces)
    report = DensifyReport(updated, index_map, is_clone, n_removed, n_clones,
                           n_prune - n_removed, n_densify - n_clones)
    if report.prune_deficit or report.clone_deficit:
        logger.warning("Densify deficits: %d prunes and %d clones could not be placed.",
                       report.prune_deficit, report.clone_deficit)
    logger.info("Densify: pruned %d, cloned %d, %d prototypes.", n_removed, n_clones, len(updated))
    return report


# --- Prototype blob ---

def write_prototypes(prototypes: GaussianPrototypes, path: str) -> None:
    """Little-endian blob: magic, version, count, then fixed-width records."""
    header = np.array([(PROTOTYPE_MAGIC, PROTOTYPE_VERSION, len(prototypes))], dtype=PROTOTYPE_HEADER)
    records = np.empty(len(prototypes), dtype=PROTOTYPE_RECORD)
    records["params"] = np.column_stack([prototypes.offset, prototypes.rotation, prototypes.log_scale,
                                         prototypes.opacity_logit, prototypes.albedo])
    records["parent"] = prototypes.parent_face
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(records.tobytes())
    logger.debug("Wrote %d prototypes to %s.", len(prototypes), path)


def read_prototypes(path: str) -> GaussianPrototypes:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError as e:
        raise MissingInputError(path, "prototype file") from e
    if len(data) < PROTOTYPE_HEADER.itemsize:
        raise CheckpointError(f"Prototype file '{path}' is truncated.")
    header = np.frombuffer(data[:PROTOTYPE_HEADER.itemsize], dtype=PROTOTYPE_HEADER)[0]
    if header["magic"] != PROTOTYPE_MAGIC:
        raise CheckpointError(f"'{path}' is not a prototype file.")
    if header["version"] != PROTOTYPE_VERSION:
        raise CheckpointError(
            f"Prototype file version {header['version']} is not supported (expected {PROTOTYPE_VERSION}).")
    count = int(header["count"])
    body = data[PROTOTYPE_HEADER.itemsize:]
    if len(body) != count * PROTOTYPE_RECORD.itemsize:
        raise CheckpointError(f"Prototype file '{path}' holds {len(body)} bytes, expected {count} records.")
    records = np.frombuffer(body, dtype=PROTOTYPE_RECORD)
    params = records["params"].astype(np.float64)
    return GaussianPrototypes(
        parent_face=records["parent"].astype(np.int64),
        offset=params[:, 0:3],
        rotation=params[:, 3:7],
        log_scale=params[:, 7:9],
        opacity_logit=params[:, 9],
        albedo=params[:, 10:13],
    )
