"""Z-buffer rasterization of the posed mesh and pinhole projection of landmarks."""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .const import TILE_SIZE
from .splat_renderer import Camera
from .utils import as_array, parallel_map

# --- Logger Setup ---
logger = logging.getLogger(__name__)


@dataclass
class MeshBuffers:
    depth: np.ndarray
    normal: np.ndarray
    coverage: np.ndarray
    face_mask: np.ndarray
    face_id: np.ndarray


def _screen(camera: Camera, cam_points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    cx, cy = camera.center
    z = cam_points[..., 2]
    return cx + camera.focal * cam_points[..., 0] / z, cy - camera.focal * cam_points[..., 1] / z


def _raster_band(row0: int, row1: int, width: int, xs: np.ndarray, ys: np.ndarray, zs: np.ndarray,
                 face_ids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    depth = np.full((row1 - row0, width), np.inf)
    winner = np.full((row1 - row0, width), -1, dtype=np.int64)
    for k, f in enumerate(face_ids):
        x, y, z = xs[k], ys[k], zs[k]
        c0 = max(int(np.ceil(x.min() - 0.5)), 0)
        c1 = min(int(np.floor(x.max() - 0.5)), width - 1)
        r0 = max(int(np.ceil(y.min() - 0.5)), row0)
        r1 = min(int(np.floor(y.max() - 0.5)), row1 - 1)
        if c0 > c1 or r0 > r1:
            continue
        area = (x[1] - x[0]) * (y[2] - y[0]) - (x[2] - x[0]) * (y[1] - y[0])
        if area == 0.0:
            continue
        py, px = np.meshgrid(np.arange(r0, r1 + 1) + 0.5, np.arange(c0, c1 + 1) + 0.5, indexing="ij")
        b0 = ((x[1] - px) * (y[2] - py) - (x[2] - px) * (y[1] - py)) / area
        b1 = ((x[2] - px) * (y[0] - py) - (x[0] - px) * (y[2] - py)) / area
        b2 = 1.0 - b0 - b1
        inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
        z_pix = 1.0 / (b0 / z[0] + b1 / z[1] + b2 / z[2])
        block = depth[r0 - row0:r1 - row0 + 1, c0:c1 + 1]
        wins = inside & (z_pix < block)
        block[wins] = z_pix[wins]
        winner[r0 - row0:r1 - row0 + 1, c0:c1 + 1][wins] = f
    return depth, winner


def rasterize_mesh(vertices: np.ndarray, faces: np.ndarray, face_region: Optional[np.ndarray],
                   camera: Camera, threads: Optional[int] = None) -> MeshBuffers:
    """Nearest-triangle depth, flat face normals (camera frame), coverage and face-region mask."""
    vertices = as_array(vertices, (None, 3), "vertices")
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    h, w = camera.height, camera.width
    if face_region is None:
        face_region = np.ones(len(faces), dtype=bool)

    tri = camera.world_to_camera(vertices)[faces]
    in_front = np.all(tri[:, :, 2] > camera.near, axis=1)
    if np.any(~in_front):
        logger.debug("Dropped %d triangles crossing the near plane.", int(np.count_nonzero(~in_front)))
    kept = np.flatnonzero(in_front)
    xs, ys = _screen(camera, tri[kept]) if len(kept) else (np.zeros((0, 3)), np.zeros((0, 3)))
    zs = tri[kept, :, 2]

    bands = [(r, min(r + TILE_SIZE, h)) for r in range(0, h, TILE_SIZE)]

    def band(rows: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
        r0, r1 = rows
        touch = (ys.max(axis=1) >= r0 - 0.5) & (ys.min(axis=1) <= r1 + 0.5) if len(kept) else np.zeros(0, bool)
        return _raster_band(r0, r1, w, xs[touch], ys[touch], zs[touch], kept[touch])

    parts = parallel_map(band, bands, threads)
    depth = np.concatenate([p[0] for p in parts], axis=0)
    face_id = np.concatenate([p[1] for p in parts], axis=0)
    coverage = face_id >= 0

    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    cross = np.cross(e1, e2)
    norm = np.linalg.norm(cross, axis=1, keepdims=True)
    face_normals = cross / np.where(norm > 0, norm, 1.0)
    normal = np.zeros((h, w, 3))
    normal[coverage] = face_normals[face_id[coverage]]
    face_mask = np.zeros((h, w))
    face_mask[coverage] = np.asarray(face_region, dtype=np.float64)[face_id[coverage]]
    return MeshBuffers(depth, normal, coverage, face_mask, face_id)


def rasterize_mesh_backward(vertices: np.ndarray, faces: np.ndarray, camera: Camera, buffers: MeshBuffers,
                            grad_depth: np.ndarray, grad_normal: np.ndarray) -> np.ndarray:
    """Vertex gradients of covered-pixel depth and face normal with visibility held fixed."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    rows, cols = np.nonzero(buffers.coverage)
    grad_vertices = np.zeros_like(vertices)
    if len(rows) == 0:
        return grad_vertices
    fid = buffers.face_id[rows, cols]
    tri = camera.world_to_camera(vertices)[faces[fid]]
    d = camera.pixel_rays(rows, cols)
    c0 = tri[:, 0]
    e1 = tri[:, 1] - c0
    e2 = tri[:, 2] - c0
    nc = np.cross(e1, e2)
    nc_len = np.linalg.norm(nc, axis=1, keepdims=True)
    n = nc / nc_len
    num = np.sum(nc * c0, axis=1)
    den = np.sum(nc * d, axis=1)
    t = num / den

    g_t = grad_depth[rows, cols] * d[:, 2]
    g_num = (g_t / den)[:, None]
    g_den = (-g_t * t / den)[:, None]
    g_n = grad_normal[rows, cols]
    g_nc = g_num * c0 + g_den * d + (g_n - np.sum(g_n * n, axis=1, keepdims=True) * n) / nc_len
    g_e1 = np.cross(e2, g_nc)
    g_e2 = np.cross(g_nc, e1)
    g_c0 = g_num * nc - g_e1 - g_e2

    per_corner = [g_c0, g_e1, g_e2]
    for k in range(3):
        world = per_corner[k] @ camera.rotation
        for c in range(3):
            grad_vertices[:, c] += np.bincount(faces[fid, k], weights=world[:, c], minlength=len(vertices))
    return grad_vertices


def project_points(points: np.ndarray, camera: Camera) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates (x right, y down) and a validity flag (false at or behind the near plane)."""
    points = as_array(points, (None, 3), "points")
    cam = camera.world_to_camera(points)
    valid = cam[:, 2] > camera.near
    safe = cam.copy()
    safe[~valid, 2] = 1.0
    x, y = _screen(camera, safe)
    pixels = np.stack([x, y], axis=1)
    pixels[~valid] = np.nan
    return pixels, valid


def project_points_jacobian(points: np.ndarray, camera: Camera) -> np.ndarray:
    """d(pixel)/d(world point), shape (N, 2, 3); zero for invalid points."""
    cam = camera.world_to_camera(np.asarray(points, dtype=np.float64))
    valid = cam[:, 2] > camera.near
    x, y, z = cam[:, 0], cam[:, 1], np.where(valid, cam[:, 2], 1.0)
    f = camera.focal
    jac = np.zeros((len(cam), 2, 3))
    jac[:, 0, 0] = f / z
    jac[:, 0, 2] = -f * x / z ** 2
    jac[:, 1, 1] = -f / z
    jac[:, 1, 2] = f * y / z ** 2
    jac[~valid] = 0.0
    return jac @ camera.rotation
