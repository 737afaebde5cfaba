import io
import json
import os
import shlex
from contextlib import redirect_stderr, redirect_stdout
from typing import Callable, NamedTuple
from unittest.mock import patch

import numpy as np
import pytest

from rig_splat.blendshape_model import BlendshapeModel, build_test_head
from rig_splat.cli import main as cli
from rig_splat.gaussian_rig import WorldSplats
from rig_splat.splat_renderer import Camera
from rig_splat.utils import normalize_quat, quat_to_matrix


# --- Fixtures ---

@pytest.fixture(scope="session")
def test_head() -> BlendshapeModel:
    return build_test_head()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# --- Scene builders ---

def random_rotations(rng: np.random.Generator, n: int, max_tilt: float = None) -> np.ndarray:
    """Random rotation matrices; with max_tilt the splat normal stays within that angle of -z."""
    if max_tilt is None:
        return quat_to_matrix(normalize_quat(rng.standard_normal((n, 4))))
    axis = rng.standard_normal((n, 3))
    axis[:, 2] = 0.0
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    angle = rng.uniform(0.0, max_tilt, n)
    spin = rng.uniform(0.0, 2 * np.pi, n)
    q_tilt = np.column_stack([np.cos(angle / 2), np.sin(angle / 2)[:, None] * axis])
    q_spin = np.column_stack([np.cos(spin / 2), np.zeros(n), np.zeros(n), np.sin(spin / 2)])
    flip = quat_to_matrix(np.array([0.0, 1.0, 0.0, 0.0]))
    return quat_to_matrix(q_tilt) @ quat_to_matrix(q_spin) @ flip


def random_splats(rng: np.random.Generator, n: int, fov_deg: float = 40.0,
                  depth=(1.5, 3.0), scale=(0.03, 0.15)) -> WorldSplats:
    """Splats scattered inside the view frustum of a camera at the origin."""
    z = rng.uniform(*depth, n)
    half = np.tan(np.radians(fov_deg) / 2.0) * z
    center = np.column_stack([rng.uniform(-1, 1, n) * half, rng.uniform(-1, 1, n) * half, z])
    return WorldSplats(
        center=center,
        rotation=random_rotations(rng, n),
        scales=rng.uniform(*scale, (n, 2)),
        opacity=rng.uniform(0.2, 0.95, n),
        albedo=rng.uniform(0.0, 1.0, (n, 3)),
    )


def make_patch_model(rng: np.random.Generator, nx: int = 2, ny: int = 2, dx: float = 0.02,
                     dy: float = 0.03, n_shape: int = 3, n_expr: int = 2,
                     basis_scale: float = 1e-3) -> BlendshapeModel:
    """Flat grid facing -z (towards a camera at the origin) with small random blendshapes."""
    xs = (np.arange(nx + 1) - nx / 2.0) * dx
    ys = (np.arange(ny + 1) - ny / 2.0) * dy
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])

    def vid(i, j):
        return i * (ny + 1) + j

    faces = []
    for i in range(nx):
        for j in range(ny):
            faces.append([vid(i, j), vid(i, j + 1), vid(i + 1, j)])
            faces.append([vid(i + 1, j + 1), vid(i + 1, j), vid(i, j + 1)])
    faces = np.array(faces)
    n_v, n_f = len(vertices), len(faces)
    return BlendshapeModel(
        base_vertices=vertices,
        faces=faces,
        shape_basis=basis_scale * rng.standard_normal((3 * n_v, n_shape)),
        expr_basis=basis_scale * rng.standard_normal((3 * n_v, n_expr)),
        neck_weights=np.linspace(0.0, 1.0, n_v),
        neck_pivot=np.array([0.0, -0.05, 0.0]),
        landmark_faces=np.array([0, n_f // 2, n_f - 1]),
        landmark_bary=np.array([[0.2, 0.3, 0.5], [0.6, 0.2, 0.2], [1 / 3, 1 / 3, 1 / 3]]),
        uv_coords=np.zeros((n_f, 3, 2)),
    )


# --- Oracles ---

def brute_force_render(splats: WorldSplats, camera: Camera, background, colors=None,
                       cutoff: float = 1.0 / 255.0, t_min: float = 1e-4):
    """Untiled per-pixel compositing: every splat against every pixel ray, front to back."""
    colors = splats.albedo if colors is None else colors
    h, w = camera.height, camera.width
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    f = camera.focal
    d = np.stack([(cols.ravel() + 0.5 - w / 2) / f, -(rows.ravel() + 0.5 - h / 2) / f, np.ones(h * w)], axis=1)
    d /= np.linalg.norm(d, axis=1, keepdims=True)

    center = splats.center @ camera.rotation.T + camera.translation
    rot = camera.rotation @ splats.rotation
    n_pix, n = len(d), len(splats)
    t = np.full((n_pix, n), np.inf)
    alpha = np.zeros((n_pix, n))
    for k in range(n):
        tu, tv, tw = rot[k][:, 0], rot[k][:, 1], rot[k][:, 2]
        den = d @ tw
        hit_t = np.where(np.abs(den) >= 1e-9, (tw @ center[k]) / np.where(den == 0, 1, den), np.nan)
        p = hit_t[:, None] * d - center[k]
        u = (p @ tu) / splats.scales[k, 0]
        v = (p @ tv) / splats.scales[k, 1]
        g = np.exp(-0.5 * (u * u + v * v))
        ok = np.isfinite(hit_t) & (hit_t > camera.near) & (hit_t < camera.far) & (g >= cutoff)
        t[:, k] = np.where(ok, hit_t, np.inf)
        alpha[:, k] = np.where(ok, splats.opacity[k] * g, 0.0)

    color = np.zeros((n_pix, 3))
    depth_sum = np.zeros(n_pix)
    normal = np.zeros((n_pix, 3))
    trans = np.ones(n_pix)
    order = np.argsort(t, axis=1, kind="stable")
    for layer in range(n):
        k = order[:, layer]
        a = alpha[np.arange(n_pix), k]
        live = np.isfinite(t[np.arange(n_pix), k]) & (trans >= t_min)
        weight = np.where(live, a * trans, 0.0)
        color += weight[:, None] * colors[k]
        depth_sum += weight * np.where(live, t[np.arange(n_pix), k], 0.0) * d[:, 2]
        normal += weight[:, None] * rot[k][:, :, 2]
        trans = np.where(live, trans * (1.0 - a), trans)
    acc = 1.0 - trans
    color += trans[:, None] * np.asarray(background)
    depth = np.where(acc > 1e-4, depth_sum / np.where(acc > 1e-4, acc, 1.0), 0.0)
    return (color.reshape(h, w, 3), depth.reshape(h, w), normal.reshape(h, w, 3), acc.reshape(h, w))


def brute_force_mesh_depth(vertices: np.ndarray, faces: np.ndarray, camera: Camera):
    """Per-pixel ray/triangle intersection; returns camera-z depth (inf where empty) and the face hit."""
    h, w = camera.height, camera.width
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    f = camera.focal
    d = np.stack([(cols.ravel() + 0.5 - w / 2) / f, -(rows.ravel() + 0.5 - h / 2) / f, np.ones(h * w)], axis=1)
    tri = (vertices @ camera.rotation.T + camera.translation)[faces]
    best = np.full(h * w, np.inf)
    face = np.full(h * w, -1)
    for k, (a, b, c) in enumerate(tri):
        if min(a[2], b[2], c[2]) <= camera.near:
            continue
        e1, e2 = b - a, c - a
        p = np.cross(d, e2)
        det = p @ e1
        if abs(det) < 1e-15:
            continue
        s = -a
        u = (p @ s) / det
        q = np.cross(s, e1)
        v = (d @ q) / det
        z = (q @ e2) / det
        hit = (u >= 0) & (v >= 0) & (u + v <= 1) & (z > 0) & (z < best)
        best[hit] = z[hit]
        face[hit] = k
    return best.reshape(h, w), face.reshape(h, w)


def finite_difference(func: Callable[[], float], array: np.ndarray, index, step: float = 1e-4) -> float:
    """Central difference of func() with respect to array[index], restoring the entry afterwards."""
    original = array[index]
    array[index] = original + step
    plus = func()
    array[index] = original - step
    minus = func()
    array[index] = original
    return (plus - minus) / (2.0 * step)


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    s = np.clip(((p - a) @ ab) / max(ab @ ab, 1e-300), 0.0, 1.0)
    return np.linalg.norm(p - (a + s[:, None] * ab), axis=1)


def exhaustive_point_mesh_distance(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Minimum over all faces of the plane distance (projection inside) or the nearest edge distance."""
    best = np.full(len(points), np.inf)
    for a, b, c in vertices[faces]:
        n = np.cross(b - a, c - a)
        area2 = np.linalg.norm(n)
        dist = np.minimum(np.minimum(_segment_distance(points, a, b), _segment_distance(points, b, c)),
                          _segment_distance(points, c, a))
        if area2 > 0:
            n = n / area2
            height = (points - a) @ n
            proj = points - height[:, None] * n
            w_a = np.cross(c - b, proj - b) @ n
            w_b = np.cross(a - c, proj - c) @ n
            w_c = np.cross(b - a, proj - a) @ n
            inside = (w_a >= 0) & (w_b >= 0) & (w_c >= 0)
            dist = np.where(inside, np.abs(height), dist)
        best = np.minimum(best, dist)
    return best


# --- CLI harness ---

class CommandResult(NamedTuple):
    exit_code: int
    stdout: str
    stderr: str


def run_rig_splat_command(command: str) -> CommandResult:
    """Runs the CLI in-process with patched argv and captured streams."""
    stdout_buffer = io.StringIO()
    stderr_buffer = io.StringIO()
    exit_code = 0
    with redirect_stdout(stdout_buffer), redirect_stderr(stderr_buffer):
        with patch("sys.argv", ["rig-splat"] + shlex.split(command)):
            try:
                cli()
            except SystemExit as e:
                exit_code = e.code if isinstance(e.code, int) else (0 if e.code is None else 1)
    return CommandResult(exit_code, stdout_buffer.getvalue(), stderr_buffer.getvalue())


def run_rig_splat_json(command: str) -> dict:
    """Runs a --json command and returns the parsed result, failing on a nonzero exit."""
    result = run_rig_splat_command(f"{command} --json")
    assert result.exit_code == 0, f"Command failed ({result.exit_code}):\n{result.stderr}"
    return json.loads(result.stdout)


def read_bytes(path: str) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def tree_bytes(root: str, skip=()) -> dict:
    """Relative path -> file bytes for every file under root."""
    out = {}
    for directory, _, files in os.walk(root):
        for name in files:
            rel = os.path.relpath(os.path.join(directory, name), root)
            if rel not in skip:
                out[rel] = read_bytes(os.path.join(directory, name))
    return out
