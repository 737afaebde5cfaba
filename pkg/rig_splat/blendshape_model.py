"""Parametric head mesh: blendshapes, neck skinning, triangle frames and landmarks."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import trimesh
from scipy import sparse

from .const import DEGENERATE_AREA, MODEL_MAGIC, MODEL_VERSION
from .errors import CheckpointError, InvalidInputError, MissingInputError
from .utils import (
    as_array,
    normalize_quat,
    quat_to_matrix,
    quat_to_matrix_backward,
)

# --- Logger Setup ---
logger = logging.getLogger(__name__)


@dataclass
class BlendshapeModel:
    """Base mesh plus linear shape/expression bases, neck skinning and landmark embedding."""
    base_vertices: np.ndarray
    faces: np.ndarray
    shape_basis: np.ndarray
    expr_basis: np.ndarray
    neck_weights: np.ndarray
    neck_pivot: np.ndarray
    landmark_faces: np.ndarray
    landmark_bary: np.ndarray
    uv_coords: np.ndarray
    face_region: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.base_vertices = as_array(self.base_vertices, (None, 3), "base_vertices")
        n_v = len(self.base_vertices)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise InvalidInputError(f"'faces' has shape {self.faces.shape}, expected (F, 3).")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n_v):
            raise InvalidInputError("Face index out of range of the vertex list.")
        n_f = len(self.faces)
        self.shape_basis = as_array(self.shape_basis, (3 * n_v, None), "shape_basis")
        self.expr_basis = as_array(self.expr_basis, (3 * n_v, None), "expr_basis")
        self.neck_weights = as_array(self.neck_weights, (n_v,), "neck_weights")
        if np.any(self.neck_weights < 0) or np.any(self.neck_weights > 1):
            raise InvalidInputError("Neck weights must lie in [0, 1].")
        self.neck_pivot = as_array(self.neck_pivot, (3,), "neck_pivot")
        self.landmark_faces = np.asarray(self.landmark_faces, dtype=np.int64)
        self.landmark_bary = as_array(self.landmark_bary, (len(self.landmark_faces), 3), "landmark_bary")
        if self.landmark_faces.size and (self.landmark_faces.min() < 0 or self.landmark_faces.max() >= n_f):
            raise InvalidInputError("Landmark face index out of range.")
        if np.any(self.landmark_bary < -1e-9) or not np.allclose(self.landmark_bary.sum(axis=1), 1.0, atol=1e-9):
            raise InvalidInputError("Landmark barycentric coordinates must be nonnegative and sum to 1.")
        self.uv_coords = as_array(self.uv_coords, (n_f, 3, 2), "uv_coords")
        if self.face_region is None:
            self.face_region = np.ones(n_f, dtype=bool)
        self.face_region = np.asarray(self.face_region, dtype=bool)
        if self.face_region.shape != (n_f,):
            raise InvalidInputError("'face_region' needs one flag per face.")

    @property
    def n_vertices(self) -> int:
        return len(self.base_vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[1]

    @property
    def n_expr(self) -> int:
        return self.expr_basis.shape[1]

    @property
    def n_landmarks(self) -> int:
        return len(self.landmark_faces)


@dataclass
class Pose:
    """Global rigid transform plus neck joint rotation; quaternions are (w, x, y, z)."""
    global_rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    global_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    neck_rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self) -> None:
        self.global_rotation = as_array(self.global_rotation, (4,), "global_rotation")
        self.global_translation = as_array(self.global_translation, (3,), "global_translation")
        self.neck_rotation = as_array(self.neck_rotation, (4,), "neck_rotation")
        for name in ("global_rotation", "neck_rotation"):
            if abs(np.linalg.norm(getattr(self, name)) - 1.0) > 1e-6:
                raise InvalidInputError(f"Pose '{name}' must be a unit quaternion.")

    @classmethod
    def from_raw(cls, global_rotation: np.ndarray, global_translation: np.ndarray,
                 neck_rotation: np.ndarray) -> "Pose":
        """Builds a pose from unnormalized optimizer quaternions."""
        return cls(normalize_quat(global_rotation), global_translation, normalize_quat(neck_rotation))

    def to_dict(self) -> Dict[str, List[float]]:
        return {
            "global_rotation": self.global_rotation.tolist(),
            "global_translation": self.global_translation.tolist(),
            "neck_rotation": self.neck_rotation.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, List[float]]) -> "Pose":
        return cls(np.array(data["global_rotation"]), np.array(data["global_translation"]),
                   np.array(data["neck_rotation"]))


@dataclass
class PoseGradients:
    beta: np.ndarray
    psi: np.ndarray
    global_rotation: np.ndarray
    global_translation: np.ndarray
    neck_rotation: np.ndarray


@dataclass
class TriangleFrame:
    rotation: np.ndarray
    scale: np.ndarray
    centroid: np.ndarray
    valid: bool


@dataclass
class TriangleFrames:
    """Per-face frames: rotation columns (t_u, t_v, n), scale (s_pu, s_pv, s_pn), centroid."""
    rotation: np.ndarray
    scale: np.ndarray
    centroid: np.ndarray
    valid: np.ndarray

    def __len__(self) -> int:
        return len(self.valid)

    def __getitem__(self, index: int) -> TriangleFrame:
        return TriangleFrame(self.rotation[index], self.scale[index], self.centroid[index],
                             bool(self.valid[index]))

    @property
    def degenerate_count(self) -> int:
        return int(np.count_nonzero(~self.valid))


def _check_codes(model: BlendshapeModel, beta: np.ndarray, psi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    beta = np.asarray(beta, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    if beta.shape != (model.n_shape,):
        raise InvalidInputError(f"Shape code has length {beta.shape}, model expects {model.n_shape}.")
    if psi.shape != (model.n_expr,):
        raise InvalidInputError(f"Expression code has length {psi.shape}, model expects {model.n_expr}.")
    return beta, psi


def _unposed(model: BlendshapeModel, beta: np.ndarray, psi: np.ndarray) -> np.ndarray:
    offsets = model.shape_basis @ beta + model.expr_basis @ psi
    return model.base_vertices + offsets.reshape(-1, 3)


def pose_mesh(model: BlendshapeModel, beta: np.ndarray, psi: np.ndarray, pose: Pose) -> np.ndarray:
    """Blendshapes, then neck skinning about the pivot, then the global rigid transform."""
    beta, psi = _check_codes(model, beta, psi)
    v0 = _unposed(model, beta, psi)
    neck = quat_to_matrix(pose.neck_rotation)
    w = model.neck_weights[:, None]
    rotated = (v0 - model.neck_pivot) @ neck.T + model.neck_pivot
    v1 = (1.0 - w) * v0 + w * rotated
    return v1 @ quat_to_matrix(pose.global_rotation).T + pose.global_translation


def pose_mesh_backward(model: BlendshapeModel, beta: np.ndarray, psi: np.ndarray, pose: Pose,
                       grad_vertices: np.ndarray) -> PoseGradients:
    """Pulls a gradient on posed vertices back to beta, psi and the pose quaternions/translation."""
    beta, psi = _check_codes(model, beta, psi)
    grad_vertices = as_array(grad_vertices, (model.n_vertices, 3), "grad_vertices")
    v0 = _unposed(model, beta, psi)
    neck = quat_to_matrix(pose.neck_rotation)
    rot = quat_to_matrix(pose.global_rotation)
    w = model.neck_weights[:, None]
    local = v0 - model.neck_pivot
    v1 = (1.0 - w) * v0 + w * (local @ neck.T + model.neck_pivot)

    grad_v1 = grad_vertices @ rot
    grad_rot = grad_vertices.T @ v1
    grad_v0 = (1.0 - w) * grad_v1 + w * (grad_v1 @ neck)
    grad_neck = (w * grad_v1).T @ local
    flat = grad_v0.reshape(-1)
    return PoseGradients(
        beta=model.shape_basis.T @ flat,
        psi=model.expr_basis.T @ flat,
        global_rotation=quat_to_matrix_backward(pose.global_rotation, grad_rot),
        global_translation=grad_vertices.sum(axis=0),
        neck_rotation=quat_to_matrix_backward(pose.neck_rotation, grad_neck),
    )


def triangle_frames(vertices: np.ndarray, faces: np.ndarray) -> TriangleFrames:
    """Frame of each triangle: t_u along the first edge, n the face normal, t_v = n x t_u."""
    vertices = as_array(vertices, (None, 3), "vertices")
    faces = np.asarray(faces, dtype=np.int64)
    v0, v1, v2 = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    e1, e2 = v1 - v0, v2 - v0
    cross = np.cross(e1, e2)
    cross_norm = np.linalg.norm(cross, axis=1)
    s_u = np.linalg.norm(e1, axis=1)
    valid = 0.5 * cross_norm >= DEGENERATE_AREA
    safe_cross = np.where(valid, cross_norm, 1.0)
    safe_su = np.where(valid, s_u, 1.0)

    t_u = np.where(valid[:, None], e1 / safe_su[:, None], [1.0, 0.0, 0.0])
    n = np.where(valid[:, None], cross / safe_cross[:, None], [0.0, 0.0, 1.0])
    t_v = np.cross(n, t_u)
    s_v = np.where(valid, cross_norm / safe_su, 1.0)
    s_u = np.where(valid, s_u, 1.0)
    scale = np.stack([s_u, s_v, np.minimum(s_u, s_v)], axis=1)
    rotation = np.stack([t_u, t_v, n], axis=2)
    centroid = (v0 + v1 + v2) / 3.0
    frames = TriangleFrames(rotation, scale, centroid, valid)
    if frames.degenerate_count:
        logger.warning("%d degenerate triangles marked invalid.", frames.degenerate_count)
    return frames


def triangle_frames_backward(vertices: np.ndarray, faces: np.ndarray, frames: TriangleFrames,
                             grad_rotation: np.ndarray, grad_scale: np.ndarray,
                             grad_centroid: np.ndarray) -> np.ndarray:
    """Pulls gradients on frame rotation/scale/centroid back to the vertices."""
    faces = np.asarray(faces, dtype=np.int64)
    v0, v1, v2 = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    e1, e2 = v1 - v0, v2 - v0
    cross = np.cross(e1, e2)
    cross_norm = np.where(frames.valid, np.linalg.norm(cross, axis=1), 1.0)
    len_e1 = np.where(frames.valid, np.linalg.norm(e1, axis=1), 1.0)
    t_u = frames.rotation[:, :, 0]
    n = frames.rotation[:, :, 2]

    g_tu = grad_rotation[:, :, 0].copy()
    g_tv = grad_rotation[:, :, 1]
    g_n = grad_rotation[:, :, 2].copy()
    s_u, s_v = frames.scale[:, 0], frames.scale[:, 1]
    normal_to_u = s_u <= s_v
    g_su = grad_scale[:, 0] + np.where(normal_to_u, grad_scale[:, 2], 0.0)
    g_sv = grad_scale[:, 1] + np.where(normal_to_u, 0.0, grad_scale[:, 2])

    # t_v = n x t_u
    g_n += np.cross(t_u, g_tv)
    g_tu += np.cross(g_tv, n)

    # s_v = |c| / |e1|, s_u = |e1|
    g_c = (g_sv / len_e1)[:, None] * n
    g_e1 = (g_su - g_sv * cross_norm / len_e1 ** 2)[:, None] * t_u

    # unit vectors
    g_e1 += (g_tu - np.sum(g_tu * t_u, axis=1, keepdims=True) * t_u) / len_e1[:, None]
    g_c += (g_n - np.sum(g_n * n, axis=1, keepdims=True) * n) / cross_norm[:, None]

    # c = e1 x e2
    g_e1 += np.cross(e2, g_c)
    g_e2 = np.cross(g_c, e1)

    valid = frames.valid[:, None]
    g_e1 = np.where(valid, g_e1, 0.0)
    g_e2 = np.where(valid, g_e2, 0.0)
    g_mu = np.where(valid, grad_centroid, 0.0) / 3.0

    grad_vertices = np.zeros_like(vertices)
    np.add.at(grad_vertices, faces[:, 0], g_mu - g_e1 - g_e2)
    np.add.at(grad_vertices, faces[:, 1], g_mu + g_e1)
    np.add.at(grad_vertices, faces[:, 2], g_mu + g_e2)
    return grad_vertices


def landmarks_3d(vertices: np.ndarray, model: BlendshapeModel) -> np.ndarray:
    """Barycentric interpolation of the embedded landmarks on the posed faces."""
    corners = vertices[model.faces[model.landmark_faces]]
    return np.einsum("lk,lkc->lc", model.landmark_bary, corners)


def landmarks_3d_backward(model: BlendshapeModel, grad_landmarks: np.ndarray) -> np.ndarray:
    grad_vertices = np.zeros((model.n_vertices, 3))
    corner_ids = model.faces[model.landmark_faces]
    for k in range(3):
        np.add.at(grad_vertices, corner_ids[:, k], model.landmark_bary[:, k:k + 1] * grad_landmarks)
    return grad_vertices


def face_adjacency(faces: np.ndarray, degree: int, n_vertices: Optional[int] = None) -> np.ndarray:
    """Faces reachable within `degree` hops over shared-vertex adjacency (self included)."""
    if degree < 1:
        raise InvalidInputError("Adjacency degree must be at least 1.")
    faces = np.asarray(faces, dtype=np.int64)
    n_f = len(faces)
    n_v = n_vertices or (int(faces.max()) + 1 if n_f else 0)
    rows = np.repeat(np.arange(n_f), 3)
    incidence = sparse.csr_matrix((np.ones(3 * n_f), (rows, faces.reshape(-1))), shape=(n_f, n_v))
    step = (incidence @ incidence.T).astype(bool).astype(np.int64).tocsr()
    reach = step
    for _ in range(degree - 1):
        reach = (reach @ step).astype(bool).astype(np.int64).tocsr()
    return reach.toarray().astype(bool)


# --- Bundled procedural head ---

def _smoothstep(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    t = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _wrap(phi: np.ndarray) -> np.ndarray:
    return (phi + np.pi) % (2.0 * np.pi) - np.pi


def _bump(theta: np.ndarray, phi: np.ndarray, theta0: float, phi0: float, width: float) -> np.ndarray:
    return np.exp(-((theta - theta0) ** 2 + _wrap(phi - phi0) ** 2) / width ** 2)


def _head_surface(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Ellipsoidal head with a nose and a narrowed neck; the face looks along -z."""
    d = np.stack([np.sin(theta) * np.sin(phi), np.cos(theta), -np.sin(theta) * np.cos(phi)], axis=-1)
    p = d * np.array([0.078, 0.105, 0.095])
    neck = _smoothstep(-d[..., 1], 0.55, 1.0)
    p[..., 0] *= 1.0 - 0.45 * neck
    p[..., 2] *= 1.0 - 0.45 * neck
    p[..., 1] -= 0.04 * neck
    p[..., 2] -= 0.018 * _bump(theta, phi, 1.5, 0.0, 0.22)
    return p


# 68 points: jaw 17, brows 10, nose 9, eyes 12, mouth 20; (theta, phi) in degrees.
def _landmark_angles() -> np.ndarray:
    jaw_phi = np.linspace(-75.0, 75.0, 17)
    jaw = np.stack([103.0 + 17.0 * (1.0 - np.abs(jaw_phi) / 75.0), jaw_phi], axis=1)
    brows = np.stack([np.full(10, 62.0), np.r_[np.linspace(-40, -10, 5), np.linspace(10, 40, 5)]], axis=1)
    bridge = np.stack([np.linspace(70.0, 88.0, 4), np.zeros(4)], axis=1)
    nostrils = np.stack([np.full(5, 94.0), np.linspace(-10.0, 10.0, 5)], axis=1)
    ring6 = np.linspace(0.0, 2.0 * np.pi, 6, endpoint=False)
    eyes = np.concatenate([
        np.stack([76.0 + 3.0 * np.sin(ring6), side * 22.0 + 8.0 * np.cos(ring6)], axis=1)
        for side in (-1.0, 1.0)
    ])
    ring12 = np.linspace(0.0, 2.0 * np.pi, 12, endpoint=False)
    ring8 = np.linspace(0.0, 2.0 * np.pi, 8, endpoint=False)
    mouth = np.concatenate([
        np.stack([105.0 + 5.0 * np.sin(ring12), 18.0 * np.cos(ring12)], axis=1),
        np.stack([105.0 + 2.0 * np.sin(ring8), 12.0 * np.cos(ring8)], axis=1),
    ])
    return np.radians(np.concatenate([jaw, brows, bridge, nostrils, eyes, mouth]))


def build_test_head(n_lat: int = 22, n_lon: int = 24) -> BlendshapeModel:
    """Builds the bundled head-like test model (lat-long grid, 10 shape and 6 expression modes)."""
    ring_theta = np.arange(1, n_lat + 1) * np.pi / (n_lat + 1)
    ring_phi = np.arange(n_lon) * 2.0 * np.pi / n_lon
    theta = np.concatenate([[0.0], np.repeat(ring_theta, n_lon), [np.pi]])
    phi = np.concatenate([[0.0], np.tile(ring_phi, n_lat), [0.0]])
    vertices = _head_surface(theta, phi)
    top, bottom = 0, 1 + n_lat * n_lon

    def ring(i: int, j: np.ndarray) -> np.ndarray:
        return 1 + (i - 1) * n_lon + (j % n_lon)

    j = np.arange(n_lon)
    faces = [np.stack([np.full(n_lon, top), ring(1, j + 1), ring(1, j)], axis=1)]
    for i in range(1, n_lat):
        a, b, c, d = ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1)
        quads = np.empty((2 * n_lon, 3), dtype=np.int64)
        quads[0::2] = np.stack([a, b, c], axis=1)
        quads[1::2] = np.stack([b, d, c], axis=1)
        faces.append(quads)
    faces.append(np.stack([ring(n_lat, j), ring(n_lat, j + 1), np.full(n_lon, bottom)], axis=1))
    faces = np.concatenate(faces).astype(np.int64)

    # landmarks: locate each (theta, phi) in its grid cell and triangle
    lm = _landmark_angles()
    s = lm[:, 0] / np.pi * (n_lat + 1)
    ring_i = np.floor(s).astype(np.int64)
    fa = s - ring_i
    t = (lm[:, 1] % (2.0 * np.pi)) / (2.0 * np.pi) * n_lon
    cell_j = np.floor(t).astype(np.int64) % n_lon
    fb = t - np.floor(t)
    first = fa + fb <= 1.0
    base = n_lon + 2 * ((ring_i - 1) * n_lon + cell_j)
    landmark_faces = np.where(first, base, base + 1)
    landmark_bary = np.where(first[:, None],
                             np.stack([1.0 - fa - fb, fb, fa], axis=1),
                             np.stack([1.0 - fa, fa + fb - 1.0, 1.0 - fb], axis=1))

    direction = np.stack([np.sin(theta) * np.sin(phi), np.cos(theta), -np.sin(theta) * np.cos(phi)], axis=1)
    shape_fields = [
        vertices * [0.06, 0.0, 0.0],
        vertices * [0.0, 0.05, 0.0],
        vertices * [0.0, 0.0, 0.05],
    ]
    dx, dy, dz = direction[:, 0], direction[:, 1], direction[:, 2]
    for radial in (dx * dy, dy * dz, dx * dz, dx * dx - dz * dz, 3.0 * dy * dy - 1.0,
                   dz * (5.0 * dy * dy - 1.0), dx * (dx * dx - 3.0 * dz * dz)):
        shape_fields.append(0.004 * radial[:, None] * direction)
    shape_basis = np.stack([f.reshape(-1) for f in shape_fields], axis=1)

    lower = _smoothstep(theta, 1.7, 1.95) * np.exp(-(_wrap(phi) / 0.9) ** 2)
    corners = [(_bump(theta, phi, 1.83, side * 0.3, 0.15), side) for side in (-1.0, 1.0)]
    cheeks = _bump(theta, phi, 1.65, 0.5, 0.25) + _bump(theta, phi, 1.65, -0.5, 0.25)
    squint = _bump(theta, phi, 1.33, 0.38, 0.12) + _bump(theta, phi, 1.33, -0.38, 0.12)
    expr_fields = [
        lower[:, None] * [0.0, -0.008, -0.002],
        sum(g[:, None] * [side * 0.004, 0.004, 0.0] for g, side in corners),
        (np.exp(-((theta - 1.08) / 0.12) ** 2 - (_wrap(phi) / 0.6) ** 2))[:, None] * [0.0, 0.005, 0.0],
        0.006 * cheeks[:, None] * direction,
        _bump(theta, phi, 1.83, 0.0, 0.15)[:, None] * [0.0, 0.0, -0.006],
        squint[:, None] * [0.0, -0.003, 0.0],
    ]
    expr_basis = np.stack([f.reshape(-1) for f in expr_fields], axis=1)

    neck_weights = _smoothstep(direction[:, 1], -0.85, -0.5)
    uv = np.stack([phi / (2.0 * np.pi), theta / np.pi], axis=1)[faces]
    centroid_dir = direction[faces].mean(axis=1)
    c_theta = np.arccos(np.clip(centroid_dir[:, 1] / np.linalg.norm(centroid_dir, axis=1), -1.0, 1.0))
    c_phi = np.arctan2(centroid_dir[:, 0], -centroid_dir[:, 2])
    face_region = (c_theta > 0.85) & (c_theta < 2.15) & (np.abs(c_phi) < 1.2)

    model = BlendshapeModel(
        base_vertices=vertices,
        faces=faces,
        shape_basis=shape_basis,
        expr_basis=expr_basis,
        neck_weights=neck_weights,
        neck_pivot=np.array([0.0, -0.07, 0.0]),
        landmark_faces=landmark_faces,
        landmark_bary=landmark_bary,
        uv_coords=uv,
        face_region=face_region,
    )
    logger.debug("Built test head: %d vertices, %d faces, %d landmarks.",
                 model.n_vertices, model.n_faces, model.n_landmarks)
    return model


# --- File I/O ---

def save_model(model: BlendshapeModel, path: str) -> None:
    """Writes the reference text form: header, counts, then whitespace-separated values."""
    def block(arr: np.ndarray, fmt: str = "%.17g") -> str:
        arr = np.atleast_2d(arr)
        return "\n".join(" ".join(fmt % x for x in row) for row in arr)

    parts = [
        f"{MODEL_MAGIC} {MODEL_VERSION}",
        f"{model.n_vertices} {model.n_faces} {model.n_shape} {model.n_expr} {model.n_landmarks}",
        block(model.base_vertices),
        block(model.faces, "%d"),
        block(model.shape_basis),
        block(model.expr_basis),
        block(model.neck_weights[:, None]),
        block(model.neck_pivot[None, :]),
        block(np.column_stack([model.landmark_faces, model.landmark_bary]), "%.17g"),
        block(model.uv_coords.reshape(model.n_faces, 6)),
        block(model.face_region.astype(np.int64)[None, :], "%d"),
    ]
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")
    logger.info("Model written to %s.", path)


def load_model(path: str) -> BlendshapeModel:
    """Reads a model written by save_model."""
    try:
        with open(path, "r") as f:
            tokens = f.read().split()
    except FileNotFoundError as e:
        raise MissingInputError(path, "model file") from e
    if len(tokens) < 7 or tokens[0] != MODEL_MAGIC:
        raise CheckpointError(f"'{path}' is not a rig-splat model file.")
    if int(tokens[1]) != MODEL_VERSION:
        raise CheckpointError(f"Model file version {tokens[1]} is not supported (expected {MODEL_VERSION}).")
    n_v, n_f, n_b, n_p, n_l = (int(t) for t in tokens[2:7])
    values = np.array(tokens[7:], dtype=np.float64)
    sizes = [3 * n_v, 3 * n_f, 3 * n_v * n_b, 3 * n_v * n_p, n_v, 3, 4 * n_l, 6 * n_f, n_f]
    if len(values) != sum(sizes):
        raise CheckpointError(f"Model file '{path}' has {len(values)} values, expected {sum(sizes)}.")
    chunks = np.split(values, np.cumsum(sizes)[:-1])
    landmarks = chunks[6].reshape(n_l, 4)
    model = BlendshapeModel(
        base_vertices=chunks[0].reshape(n_v, 3),
        faces=chunks[1].reshape(n_f, 3).astype(np.int64),
        shape_basis=chunks[2].reshape(3 * n_v, n_b),
        expr_basis=chunks[3].reshape(3 * n_v, n_p),
        neck_weights=chunks[4],
        neck_pivot=chunks[5],
        landmark_faces=landmarks[:, 0].astype(np.int64),
        landmark_bary=landmarks[:, 1:],
        uv_coords=chunks[7].reshape(n_f, 3, 2),
        face_region=chunks[8].astype(bool),
    )
    logger.info("Model loaded from %s (%d vertices).", path, n_v)
    return model


def export_obj(vertices: np.ndarray, faces: np.ndarray, path: str) -> None:
    """Writes an OBJ with v/f records (1-based indices)."""
    mesh = trimesh.Trimesh(vertices=np.asarray(vertices), faces=np.asarray(faces), process=False)
    mesh.export(path, file_type="obj", include_normals=False, include_texture=False)
    logger.info("Mesh written to %s.", path)


def load_obj(path: str) -> Tuple[np.ndarray, np.ndarray]:
    try:
        mesh = trimesh.load(path, file_type="obj", process=False, force="mesh")
    except (FileNotFoundError, ValueError) as e:
        raise MissingInputError(path, "mesh file") from e
    return np.asarray(mesh.vertices, dtype=np.float64), np.asarray(mesh.faces, dtype=np.int64)
