import os
import sys
import zlib
import logging
from concurrent.futures import ThreadPoolExecutor
from functools import wraps
from typing import Any, Callable, Iterable, List, Optional, Tuple

import numpy as np

from .errors import InvalidInputError, RigSplatError

# --- Logger Setup ---
logger = logging.getLogger(__name__)


def handle_exception(func: Callable[..., Any]) -> Callable[..., Any]:
    """A decorator to catch and print RigSplatError exceptions, then exit with their code."""
    @wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except RigSplatError as e:
            logger.debug("Command failed.", exc_info=True)
            print(f"Error: {e}", file=sys.stderr)
            sys.exit(e.exit_code)
    return wrapper


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Returns an independent generator for the named stream of a run seed."""
    sequence = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode("utf-8")),))
    return np.random.Generator(np.random.PCG64(sequence))


def default_threads() -> int:
    """Number of worker threads used when none is configured."""
    return os.cpu_count() or 1


def parallel_map(func: Callable[[Any], Any], items: Iterable[Any], threads: Optional[int]) -> List[Any]:
    """Maps func over items, preserving input order regardless of thread count."""
    items = list(items)
    threads = threads or default_threads()
    if threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))


def as_array(value: Any, shape: Tuple[Optional[int], ...], name: str) -> np.ndarray:
    """Converts value to float64 and checks its shape (None matches any size)."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != len(shape) or any(s is not None and s != a for s, a in zip(shape, arr.shape)):
        raise InvalidInputError(f"'{name}' has shape {arr.shape}, expected {shape}.")
    return arr


# --- Quaternions (w, x, y, z) ---

def normalize_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def normalize_quat_backward(q_raw: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Pulls a gradient on q/|q| back to the raw quaternion."""
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    unit = q_raw / norm
    radial = np.sum(unit * grad_unit, axis=-1, keepdims=True)
    return (grad_unit - radial * unit) / norm


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions of shape (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_to_matrix_backward(q: np.ndarray, grad_m: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the (unit) quaternion given a gradient on its rotation matrix."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = grad_m
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([gw, gx, gy, gz], axis=-1)


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b (rotation b first, then a)."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_from_euler_deg(rx: float, ry: float, rz: float) -> np.ndarray:
    """Quaternion for intrinsic X, then Y, then Z rotations given in degrees."""
    qx = quat_from_axis_angle([1.0, 0.0, 0.0], np.radians(rx))
    qy = quat_from_axis_angle([0.0, 1.0, 0.0], np.radians(ry))
    qz = quat_from_axis_angle([0.0, 0.0, 1.0], np.radians(rz))
    return quat_multiply(qz, quat_multiply(qy, qx))


def norm_and_direction(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Euclidean norm along the last axis and its gradient direction (zero at the origin)."""
    norm = np.linalg.norm(x, axis=-1)
    safe = np.where(norm > 0, norm, 1.0)
    direction = np.where(norm[..., None] > 0, x / safe[..., None], 0.0)
    return norm, direction
