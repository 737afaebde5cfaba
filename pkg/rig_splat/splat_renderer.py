"""Tile-based surfel renderer producing colour, depth, normal and alpha buffers, with its backward pass."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .const import (
    ALPHA_CUTOFF,
    DEFAULT_FAR,
    DEFAULT_FOV_DEG,
    DEFAULT_NEAR,
    DEFAULT_RESOLUTION,
    DEPTH_ALPHA_EPS,
    PARALLEL_EPS,
    TILE_SIZE,
    TRANSMITTANCE_EPS,
)
from .errors import InvalidInputError
from .gaussian_rig import SplatGradients, WorldSplat, WorldSplats
from .utils import as_array, parallel_map

# --- Logger Setup ---
logger = logging.getLogger(__name__)

# uv radius at which the Gaussian weight falls to the cutoff
CUTOFF_RADIUS = float(np.sqrt(2.0 * np.log(1.0 / ALPHA_CUTOFF)))


@dataclass
class Camera:
    """Pinhole camera; x_cam = rotation @ x_world + translation, looking along +z with y up."""
    width: int = DEFAULT_RESOLUTION
    height: int = DEFAULT_RESOLUTION
    fov_deg: float = DEFAULT_FOV_DEG
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR

    def __post_init__(self) -> None:
        if not 0.0 < self.fov_deg < 180.0:
            raise InvalidInputError(f"Camera FOV must lie in (0, 180) degrees, got {self.fov_deg}.")
        if self.width < 8 or self.height < 8:
            raise InvalidInputError(f"Camera image must be at least 8x8 pixels, got {self.width}x{self.height}.")
        if not 0.0 < self.near < self.far:
            raise InvalidInputError(f"Camera clip range must satisfy 0 < near < far, got {self.near}, {self.far}.")
        self.width, self.height = int(self.width), int(self.height)
        self.rotation = as_array(self.rotation, (3, 3), "camera rotation")
        self.translation = as_array(self.translation, (3,), "camera translation")

    @property
    def focal(self) -> float:
        return 0.5 * self.height / np.tan(np.radians(self.fov_deg) / 2.0)

    @property
    def center(self) -> Tuple[float, float]:
        return 0.5 * self.width, 0.5 * self.height

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def pixel_rays(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Unit camera-frame directions through pixel centres."""
        cx, cy = self.center
        f = self.focal
        d = np.stack([(cols + 0.5 - cx) / f, -(rows + 0.5 - cy) / f, np.ones(np.shape(rows))], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def to_dict(self) -> Dict[str, object]:
        return {
            "width": self.width,
            "height": self.height,
            "fov_deg": self.fov_deg,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "Camera":
        return cls(int(data["width"]), int(data["height"]), float(data["fov_deg"]),
                   np.array(data["rotation"]), np.array(data["translation"]),
                   float(data["near"]), float(data["far"]))


@dataclass
class RenderBuffers:
    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    alpha: np.ndarray


@dataclass
class BufferGradients:
    """Upstream gradients on render buffers; missing buffers count as zero."""
    color: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None

    def resolved(self, height: int, width: int) -> "BufferGradients":
        shapes = {"color": (height, width, 3), "depth": (height, width),
                  "normal": (height, width, 3), "alpha": (height, width)}
        out = {}
        for name, shape in shapes.items():
            value = getattr(self, name)
            if value is None:
                out[name] = np.zeros(shape)
            else:
                value = np.asarray(value, dtype=np.float64)
                if value.shape != shape:
                    raise InvalidInputError(f"Gradient on '{name}' has shape {value.shape}, expected {shape}.")
                out[name] = value
        return BufferGradients(**out)


def splat_plane(splat: WorldSplat) -> np.ndarray:
    """Homogeneous plane matrix mapping (u, v, 1, 1) to the world point on the splat."""
    h = np.zeros((4, 4))
    h[:3, 0] = splat.scales[0] * splat.rotation[:, 0]
    h[:3, 1] = splat.scales[1] * splat.rotation[:, 1]
    h[:3, 3] = splat.center
    h[3, 3] = 1.0
    return h


def intersect(origin: np.ndarray, direction: np.ndarray, splat: WorldSplat,
              near: float = DEFAULT_NEAR, far: float = DEFAULT_FAR) -> Optional[Tuple[float, float, float]]:
    """Ray/splat-plane hit as (u, v, t), or None on a miss."""
    t_u, t_v, t_w = splat.rotation[:, 0], splat.rotation[:, 1], splat.rotation[:, 2]
    rel = np.asarray(splat.center, dtype=np.float64) - origin
    denom = float(t_w @ direction)
    if abs(denom) < PARALLEL_EPS:
        return None
    t = float(t_w @ rel) / denom
    if t <= near or t >= far:
        return None
    r = t * np.asarray(direction) - rel
    return float(t_u @ r) / splat.scales[0], float(t_v @ r) / splat.scales[1], t


def splat_weight(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * (np.square(u) + np.square(v)))


class _CameraSplats(NamedTuple):
    center: np.ndarray
    t_u: np.ndarray
    t_v: np.ndarray
    t_w: np.ndarray
    s_u: np.ndarray
    s_v: np.ndarray
    opacity: np.ndarray
    color: np.ndarray


class _Tile(NamedTuple):
    rows: np.ndarray
    cols: np.ndarray
    candidates: np.ndarray


class _Layers(NamedTuple):
    """Per-pixel contributions of one tile, sorted front to back along axis 1."""
    order: np.ndarray
    t: np.ndarray
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    alpha: np.ndarray
    trans: np.ndarray
    active: np.ndarray
    weight: np.ndarray
    trans_final: np.ndarray


def _to_camera(splats: WorldSplats, camera: Camera, colors: np.ndarray) -> _CameraSplats:
    rot = np.einsum("ij,njk->nik", camera.rotation, splats.rotation)
    return _CameraSplats(camera.world_to_camera(splats.center), rot[:, :, 0], rot[:, :, 1], rot[:, :, 2],
                         splats.scales[:, 0], splats.scales[:, 1], splats.opacity, colors)


def _tiles(cs: _CameraSplats, camera: Camera) -> List[_Tile]:
    """Bins splats into 16x16 tiles by the projected square enclosing their cutoff disc."""
    n_tx = -(-camera.width // TILE_SIZE)
    n_ty = -(-camera.height // TILE_SIZE)
    n = len(cs.center)
    tx0 = np.zeros(n, dtype=np.int64)
    tx1 = np.full(n, n_tx - 1)
    ty0 = np.zeros(n, dtype=np.int64)
    ty1 = np.full(n, n_ty - 1)
    if n:
        eu = CUTOFF_RADIUS * cs.s_u[:, None] * cs.t_u
        ev = CUTOFF_RADIUS * cs.s_v[:, None] * cs.t_v
        corners = cs.center[:, None, :] + np.stack([eu + ev, eu - ev, -eu + ev, -eu - ev], axis=1)
        z = corners[..., 2]
        behind = np.any(z <= camera.near, axis=1)
        safe_z = np.where(z > camera.near, z, 1.0)
        cx, cy = camera.center
        x = cx + camera.focal * corners[..., 0] / safe_z
        y = cy - camera.focal * corners[..., 1] / safe_z
        col0 = np.floor(x.min(axis=1) - 0.5)
        col1 = np.ceil(x.max(axis=1) - 0.5)
        row0 = np.floor(y.min(axis=1) - 0.5)
        row1 = np.ceil(y.max(axis=1) - 0.5)
        with np.errstate(invalid="ignore"):
            tx0 = np.where(behind, 0, np.floor_divide(np.clip(col0, -TILE_SIZE, camera.width + TILE_SIZE), TILE_SIZE))
            tx1 = np.where(behind, n_tx - 1, np.floor_divide(np.clip(col1, -TILE_SIZE, camera.width + TILE_SIZE), TILE_SIZE))
            ty0 = np.where(behind, 0, np.floor_divide(np.clip(row0, -TILE_SIZE, camera.height + TILE_SIZE), TILE_SIZE))
            ty1 = np.where(behind, n_ty - 1, np.floor_divide(np.clip(row1, -TILE_SIZE, camera.height + TILE_SIZE), TILE_SIZE))
    tiles = []
    for ty in range(n_ty):
        for tx in range(n_tx):
            r = np.arange(ty * TILE_SIZE, min((ty + 1) * TILE_SIZE, camera.height))
            c = np.arange(tx * TILE_SIZE, min((tx + 1) * TILE_SIZE, camera.width))
            rows, cols = np.meshgrid(r, c, indexing="ij")
            cand = np.flatnonzero((tx0 <= tx) & (tx <= tx1) & (ty0 <= ty) & (ty <= ty1))
            tiles.append(_Tile(rows.ravel(), cols.ravel(), cand))
    return tiles


def _layers(cs: _CameraSplats, cand: np.ndarray, dirs: np.ndarray, near: float, far: float) -> _Layers:
    """Intersects every pixel ray with every candidate splat and sorts the hits by distance."""
    mu, t_u, t_v, t_w = cs.center[cand], cs.t_u[cand], cs.t_v[cand], cs.t_w[cand]
    s_u, s_v = cs.s_u[cand], cs.s_v[cand]
    denom = dirs @ t_w.T
    ok = np.abs(denom) >= PARALLEL_EPS
    t = np.where(ok, np.sum(t_w * mu, axis=1) / np.where(ok, denom, 1.0), 0.0)
    u = (t * (dirs @ t_u.T) - np.sum(t_u * mu, axis=1)) / s_u
    v = (t * (dirs @ t_v.T) - np.sum(t_v * mu, axis=1)) / s_v
    w = splat_weight(u, v)
    valid = ok & (t > near) & (t < far) & (w >= ALPHA_CUTOFF)

    order = np.argsort(np.where(valid, t, np.inf), axis=1, kind="stable")

    def take(a: np.ndarray) -> np.ndarray:
        return np.take_along_axis(a, order, axis=1)

    t, u, v, w, valid = take(t), take(u), take(v), take(w), take(valid)
    alpha = np.where(valid, cs.opacity[cand][order] * w, 0.0)
    keep = 1.0 - alpha
    trans = np.concatenate([np.ones((len(dirs), 1)), np.cumprod(keep, axis=1)[:, :-1]], axis=1)
    active = valid & (trans >= TRANSMITTANCE_EPS)
    weight = np.where(active, alpha * trans, 0.0)
    trans_final = np.prod(np.where(active, keep, 1.0), axis=1)
    return _Layers(order, t, u, v, w, alpha, trans, active, weight, trans_final)


def _render_tile(cs: _CameraSplats, tile: _Tile, camera: Camera,
                 background: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    dirs = camera.pixel_rays(tile.rows, tile.cols)
    n_pix = len(dirs)
    if len(tile.candidates) == 0:
        return np.tile(background, (n_pix, 1)), np.zeros(n_pix), np.zeros((n_pix, 3)), np.zeros(n_pix)
    lay = _layers(cs, tile.candidates, dirs, camera.near, camera.far)
    ids = tile.candidates[lay.order]
    color = np.einsum("pk,pkc->pc", lay.weight, cs.color[ids]) + lay.trans_final[:, None] * background
    acc = 1.0 - lay.trans_final
    depth_sum = np.sum(lay.weight * lay.t * dirs[:, 2:3], axis=1)
    depth = np.where(acc > DEPTH_ALPHA_EPS, depth_sum / np.where(acc > DEPTH_ALPHA_EPS, acc, 1.0), 0.0)
    normal = np.einsum("pk,pkc->pc", lay.weight, cs.t_w[ids])
    return color, depth, normal, acc


def render(splats: WorldSplats, camera: Camera, background: Sequence[float] = (0.0, 0.0, 0.0),
           colors: Optional[np.ndarray] = None, threads: Optional[int] = None) -> RenderBuffers:
    """Front-to-back composites the splats per pixel; colours default to the splat albedo."""
    background = as_array(background, (3,), "background")
    colors = splats.albedo if colors is None else as_array(colors, (len(splats), 3), "colors")
    cs = _to_camera(splats, camera, colors)
    tiles = _tiles(cs, camera)
    results = parallel_map(lambda tile: _render_tile(cs, tile, camera, background), tiles, threads)

    h, w = camera.height, camera.width
    out = RenderBuffers(np.zeros((h, w, 3)), np.zeros((h, w)), np.zeros((h, w, 3)), np.zeros((h, w)))
    for tile, (color, depth, normal, alpha) in zip(tiles, results):
        out.color[tile.rows, tile.cols] = color
        out.depth[tile.rows, tile.cols] = depth
        out.normal[tile.rows, tile.cols] = normal
        out.alpha[tile.rows, tile.cols] = alpha
    logger.debug("Rendered %d splats into %d tiles (%d splat/tile pairs).",
                 len(splats), len(tiles), sum(len(t.candidates) for t in tiles))
    return out


def _column_sum(order: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Sums sorted per-pixel values back onto candidate columns."""
    flat = order.ravel()
    if values.ndim == 2:
        return np.bincount(flat, weights=values.ravel(), minlength=n)
    return np.stack([np.bincount(flat, weights=values[..., c].ravel(), minlength=n)
                     for c in range(values.shape[-1])], axis=-1)


def _backward_tile(cs: _CameraSplats, tile: _Tile, camera: Camera, background: np.ndarray,
                   grads: BufferGradients) -> Optional[Dict[str, np.ndarray]]:
    k = len(tile.candidates)
    if k == 0:
        return None
    dirs = camera.pixel_rays(tile.rows, tile.cols)
    lay = _layers(cs, tile.candidates, dirs, camera.near, camera.far)
    local = lambda a: a[tile.candidates][lay.order]
    c_s, mu_s, tu_s, tv_s, tw_s = local(cs.color), local(cs.center), local(cs.t_u), local(cs.t_v), local(cs.t_w)
    su_s, sv_s, sig_s = local(cs.s_u), local(cs.s_v), local(cs.opacity)

    g_color = grads.color[tile.rows, tile.cols]
    g_depth = grads.depth[tile.rows, tile.cols]
    g_normal = grads.normal[tile.rows, tile.cols]
    g_alpha = grads.alpha[tile.rows, tile.cols]

    acc = 1.0 - lay.trans_final
    has = acc > DEPTH_ALPHA_EPS
    safe_acc = np.where(has, acc, 1.0)
    z = lay.t * dirs[:, 2:3]
    depth = np.where(has, np.sum(lay.weight * z, axis=1) / safe_acc, 0.0)
    g_dsum = np.where(has, g_depth / safe_acc, 0.0)
    g_acc = g_alpha - np.where(has, g_depth * depth / safe_acc, 0.0)

    gf = (np.einsum("pc,pkc->pk", g_color, c_s) + g_dsum[:, None] * z
          + np.einsum("pc,pkc->pk", g_normal, tw_s))
    contrib = gf * lay.weight
    after = contrib.sum(axis=1, keepdims=True) - np.cumsum(contrib, axis=1)
    g_final = (g_color @ background - g_acc) * lay.trans_final
    keep = np.maximum(1.0 - lay.alpha, 1e-12)
    d_alpha = np.where(lay.active, lay.trans * gf - (after + g_final[:, None]) / keep, 0.0)

    d_sigma = d_alpha * lay.w
    d_w = d_alpha * sig_s
    d_u = -d_w * lay.w * lay.u
    d_v = -d_w * lay.w * lay.v
    d_z = g_dsum[:, None] * lay.weight

    du_s = (d_u / su_s)[..., None]
    dv_s = (d_v / sv_s)[..., None]
    r = lay.t[..., None] * dirs[:, None, :] - mu_s
    g_r = du_s * tu_s + dv_s * tv_s
    g_t = np.einsum("pkc,pc->pk", g_r, dirs) + d_z * dirs[:, 2:3]
    denom = np.einsum("pkc,pc->pk", tw_s, dirs)
    g_plane = (g_t / np.where(lay.active, denom, 1.0))[..., None]

    return {
        "center": _column_sum(lay.order, g_plane * tw_s - g_r, k),
        "t_u": _column_sum(lay.order, du_s * r, k),
        "t_v": _column_sum(lay.order, dv_s * r, k),
        "t_w": _column_sum(lay.order, lay.weight[..., None] * g_normal[:, None, :] - g_plane * r, k),
        "s_u": _column_sum(lay.order, -d_u * lay.u / su_s, k),
        "s_v": _column_sum(lay.order, -d_v * lay.v / sv_s, k),
        "opacity": _column_sum(lay.order, d_sigma, k),
        "color": _column_sum(lay.order, lay.weight[..., None] * g_color[:, None, :], k),
    }


def render_backward(splats: WorldSplats, camera: Camera, grads: BufferGradients,
                    background: Sequence[float] = (0.0, 0.0, 0.0), colors: Optional[np.ndarray] = None,
                    threads: Optional[int] = None) -> SplatGradients:
    """Gradients of the loss induced by `grads` on every world splat field (sort order held fixed)."""
    background = as_array(background, (3,), "background")
    colors = splats.albedo if colors is None else as_array(colors, (len(splats), 3), "colors")
    grads = grads.resolved(camera.height, camera.width)
    cs = _to_camera(splats, camera, colors)
    tiles = _tiles(cs, camera)
    results = parallel_map(lambda tile: _backward_tile(cs, tile, camera, background, grads), tiles, threads)

    n = len(splats)
    acc = {"center": np.zeros((n, 3)), "t_u": np.zeros((n, 3)), "t_v": np.zeros((n, 3)),
           "t_w": np.zeros((n, 3)), "s_u": np.zeros(n), "s_v": np.zeros(n),
           "opacity": np.zeros(n), "color": np.zeros((n, 3))}
    # fixed tile order keeps the reduction independent of the thread count
    for tile, part in zip(tiles, results):
        if part is None:
            continue
        for name, value in part.items():
            acc[name][tile.candidates] += value

    rot = camera.rotation
    return SplatGradients(
        center=acc["center"] @ rot,
        rotation=np.stack([acc["t_u"] @ rot, acc["t_v"] @ rot, acc["t_w"] @ rot], axis=2),
        scales=np.stack([acc["s_u"], acc["s_v"]], axis=1),
        opacity=acc["opacity"],
        color=acc["color"],
    )
