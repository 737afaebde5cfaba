"""Image, raw-buffer, landmark-table and JSON file helpers."""
import json
import logging
import os
from typing import Any, Dict, Optional, Tuple

import numpy as np
from PIL import Image

from .const import DEPTH_ALPHA_EPS, RAW_MAGIC
from .errors import CheckpointError, InvalidInputError, MissingInputError

# --- Logger Setup ---
logger = logging.getLogger(__name__)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: str, image: np.ndarray) -> None:
    """Writes a float image in [0, 1] (H x W or H x W x 3) as 8-bit PNG."""
    Image.fromarray(to_uint8(image)).save(path, format="PNG")
    logger.debug("Wrote %s.", path)


def read_png(path: str, grayscale: bool = False) -> np.ndarray:
    if not os.path.exists(path):
        raise MissingInputError(path, "image")
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L" if grayscale else "RGB"), dtype=np.float64)
    return arr / 255.0


def write_ppm(path: str, image: np.ndarray) -> None:
    """ASCII P3 PPM, one pixel per line."""
    data = to_uint8(image)
    if data.ndim == 2:
        data = np.repeat(data[..., None], 3, axis=2)
    h, w, _ = data.shape
    with open(path, "w") as f:
        f.write(f"P3\n{w} {h}\n255\n")
        np.savetxt(f, data.reshape(-1, 3), fmt="%d")


def write_raw(path: str, buffer: np.ndarray) -> None:
    """Text header line 'RSRAW1 width height channels' then little-endian float32 samples."""
    buffer = np.asarray(buffer, dtype=np.float64)
    h, w = buffer.shape[:2]
    channels = 1 if buffer.ndim == 2 else buffer.shape[2]
    with open(path, "wb") as f:
        f.write(f"{RAW_MAGIC} {w} {h} {channels}\n".encode("ascii"))
        f.write(buffer.astype("<f4").tobytes())


def read_raw(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise MissingInputError(path, "raw buffer")
    with open(path, "rb") as f:
        header = f.readline().decode("ascii", errors="replace").split()
        body = f.read()
    if len(header) != 4 or header[0] != RAW_MAGIC:
        raise CheckpointError(f"'{path}' is not a raw buffer file.")
    w, h, channels = (int(v) for v in header[1:])
    data = np.frombuffer(body, dtype="<f4").astype(np.float64)
    if data.size != w * h * channels:
        raise CheckpointError(f"Raw buffer '{path}' holds {data.size} samples, expected {w * h * channels}.")
    return data.reshape((h, w) if channels == 1 else (h, w, channels))


def depth_to_image(depth: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Near is bright, far is dark, empty is black."""
    out = np.zeros(depth.shape)
    if np.any(valid):
        lo, hi = depth[valid].min(), depth[valid].max()
        span = hi - lo if hi > lo else 1.0
        out[valid] = 1.0 - 0.8 * (depth[valid] - lo) / span
    return out


def normal_to_image(normal: np.ndarray) -> np.ndarray:
    return 0.5 * (normal + 1.0)


def write_landmarks(path: str, points: np.ndarray) -> None:
    np.savetxt(path, np.asarray(points, dtype=np.float64), fmt="%.10g")


def read_landmarks(path: str, columns: int) -> np.ndarray:
    """Whitespace table with `columns` numbers per row; 'nan' marks an unusable point."""
    if not os.path.exists(path):
        raise MissingInputError(path, "landmark file")
    try:
        data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as e:
        raise InvalidInputError(f"Landmark file '{path}' is malformed: {e}") from e
    if data.shape[1] != columns:
        raise InvalidInputError(f"Landmark file '{path}' has {data.shape[1]} columns, expected {columns}.")
    return data


def read_landmark_pairs(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """Six-column table: mesh xyz then scan xyz per row."""
    data = read_landmarks(path, 6)
    return data[:, :3], data[:, 3:]


def write_json(path: str, data: Dict[str, Any]) -> None:
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path: str, what: str = "JSON file") -> Dict[str, Any]:
    if not os.path.exists(path):
        raise MissingInputError(path, what)
    try:
        with open(path, "r") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise InvalidInputError(f"Failed to parse {what} '{path}': {e}") from e


class JsonLinesLog:
    """Append-only JSON-lines writer (one record per fit iteration)."""

    def __init__(self, path: str, append: bool = False) -> None:
        self.path = path
        self._file = open(path, "a" if append else "w")

    def write(self, record: Dict[str, Any]) -> None:
        self._file.write(json.dumps(record, sort_keys=True) + "\n")
        self._file.flush()

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "JsonLinesLog":
        return self

    def __exit__(self, *exc: Optional[BaseException]) -> None:
        self.close()


def write_render(directory: str, buffers: Any, ppm: bool = False) -> None:
    """Colour, alpha, depth and normal images plus the raw float depth and normal buffers."""
    os.makedirs(directory, exist_ok=True)
    write_png(os.path.join(directory, "color.png"), buffers.color)
    if ppm:
        write_ppm(os.path.join(directory, "color.ppm"), buffers.color)
    write_png(os.path.join(directory, "alpha.png"), buffers.alpha)
    write_png(os.path.join(directory, "depth.png"), depth_to_image(buffers.depth, buffers.alpha > DEPTH_ALPHA_EPS))
    write_png(os.path.join(directory, "normal.png"), normal_to_image(buffers.normal))
    write_raw(os.path.join(directory, "depth.raw"), buffers.depth)
    write_raw(os.path.join(directory, "normal.raw"), buffers.normal)
    logger.info("Render buffers written to %s.", directory)
