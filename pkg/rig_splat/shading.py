"""Lambertian shading with second-order spherical-harmonic lighting driven by a PCA prior."""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .const import SH_C0, SH_C1, SH_C2, SH_COEFFS
from .errors import CheckpointError, InvalidInputError, MissingInputError
from .utils import as_array

# --- Logger Setup ---
logger = logging.getLogger(__name__)

N_CHANNELS = 3
FLAT_SIZE = SH_COEFFS * N_CHANNELS


@dataclass
class LightingPrior:
    """Affine map from a D-dim lighting code to 27 SH coefficients; `basis` is held as 27 x D."""
    mean: np.ndarray
    basis: np.ndarray

    def __post_init__(self) -> None:
        self.mean = as_array(self.mean, (FLAT_SIZE,), "prior mean")
        self.basis = as_array(self.basis, (FLAT_SIZE, None), "prior basis")
        if self.basis.shape[1] < 1:
            raise InvalidInputError("Lighting prior needs at least one component.")

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]


def synthetic_prior() -> LightingPrior:
    """Warm ambient light with a weak key from the camera side and above; one component per coefficient."""
    w = np.zeros((SH_COEFFS, N_CHANNELS))
    w[0] = np.array([0.95, 0.88, 0.80]) / SH_C0
    w[2] = -0.25 / SH_C1
    w[1] = 0.10 / SH_C1
    basis = np.zeros((FLAT_SIZE, SH_COEFFS))
    for k in range(SH_COEFFS):
        for j in range(N_CHANNELS):
            basis[j * SH_COEFFS + k, k] = 0.3
    return LightingPrior(w.T.reshape(-1), basis)


def load_prior(path: str) -> LightingPrior:
    """Text file: D, then 27 mean values, then D rows of 27 values."""
    try:
        with open(path, "r") as f:
            tokens = f.read().split()
    except FileNotFoundError as e:
        raise MissingInputError(path, "lighting prior") from e
    try:
        n = int(tokens[0])
        values = np.array(tokens[1:], dtype=np.float64)
    except (IndexError, ValueError) as e:
        raise CheckpointError(f"Lighting prior '{path}' is malformed: {e}") from e
    if n < 1 or len(values) != FLAT_SIZE * (n + 1):
        raise CheckpointError(f"Lighting prior '{path}' holds {len(values)} values, expected {FLAT_SIZE * (n + 1)}.")
    prior = LightingPrior(values[:FLAT_SIZE], values[FLAT_SIZE:].reshape(n, FLAT_SIZE).T)
    logger.info("Lighting prior with %d components loaded from %s.", n, path)
    return prior


def save_prior(prior: LightingPrior, path: str) -> None:
    with open(path, "w") as f:
        f.write(f"{prior.n_components}\n")
        f.write(" ".join("%.17g" % x for x in prior.mean) + "\n")
        for row in prior.basis.T:
            f.write(" ".join("%.17g" % x for x in row) + "\n")


def _unit(normals: np.ndarray) -> np.ndarray:
    normals = np.asarray(normals, dtype=np.float64)
    norm = np.linalg.norm(normals, axis=-1, keepdims=True)
    off = np.abs(norm - 1.0) > 1e-4
    if np.any(off):
        logger.warning("Renormalized %d non-unit normals.", int(np.count_nonzero(off)))
        normals = normals / np.where(norm > 0, norm, 1.0)
    return normals


def sh_basis(normals: np.ndarray) -> np.ndarray:
    """Real SH bands 0-2 ordered [Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22]."""
    n = _unit(normals)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack([
        np.full(x.shape, SH_C0),
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[0] * y * z,
        SH_C2[1] * (3.0 * z * z - 1.0),
        SH_C2[0] * x * z,
        SH_C2[2] * (x * x - y * y),
    ], axis=-1)


def sh_basis_grad(normals: np.ndarray) -> np.ndarray:
    """Jacobian of sh_basis with respect to the normal, shape (..., 9, 3)."""
    n = np.asarray(normals, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    jac = np.zeros(n.shape[:-1] + (SH_COEFFS, 3))
    jac[..., 1, 1] = SH_C1
    jac[..., 2, 2] = SH_C1
    jac[..., 3, 0] = SH_C1
    jac[..., 4, 0] = SH_C2[0] * y
    jac[..., 4, 1] = SH_C2[0] * x
    jac[..., 5, 1] = SH_C2[0] * z
    jac[..., 5, 2] = SH_C2[0] * y
    jac[..., 6, 2] = SH_C2[1] * 6.0 * z
    jac[..., 7, 0] = SH_C2[0] * z
    jac[..., 7, 2] = SH_C2[0] * x
    jac[..., 8, 0] = SH_C2[2] * 2.0 * x
    jac[..., 8, 1] = -SH_C2[2] * 2.0 * y
    return jac


def lighting_coeffs(prior: LightingPrior, code: np.ndarray) -> np.ndarray:
    """9x3 coefficients w[k, j]; the flat vector is channel-major (flat[j*9 + k])."""
    code = np.asarray(code, dtype=np.float64)
    if code.shape != (prior.n_components,):
        raise InvalidInputError(f"Lighting code has shape {code.shape}, prior expects ({prior.n_components},).")
    flat = prior.mean + prior.basis @ code
    return flat.reshape(N_CHANNELS, SH_COEFFS).T


def lighting_coeffs_backward(prior: LightingPrior, grad_w: np.ndarray) -> np.ndarray:
    return prior.basis.T @ np.asarray(grad_w).T.reshape(-1)


def shade(albedo: np.ndarray, normals: np.ndarray, w: np.ndarray) -> np.ndarray:
    """c_j = max(0, a_j * sum_k w[k, j] SH_k(n)), per splat."""
    return np.maximum(0.0, np.asarray(albedo) * (sh_basis(normals) @ w))


def shade_backward(albedo: np.ndarray, normals: np.ndarray, w: np.ndarray,
                   grad_color: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients on (albedo, normals, w); zero where the colour was clamped."""
    basis = sh_basis(normals)
    irradiance = basis @ w
    lit = np.asarray(albedo) * irradiance > 0.0
    g = np.where(lit, grad_color, 0.0)
    g_irr = g * albedo
    g_basis = g_irr @ w.T
    return g * irradiance, np.einsum("nk,nkc->nc", g_basis, sh_basis_grad(normals)), basis.T @ g_irr
