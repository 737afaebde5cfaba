import json
import os
import shutil
import logging
from typing import Any, Dict, Optional, Tuple

import numpy as np

from .const import CHECKPOINT_VERSION
from .errors import CheckpointError, MissingInputError
from .fit_engine import Adam, FitState
from .gaussian_rig import DensifyStats, read_prototypes, write_prototypes

# --- Logger Setup ---
logger = logging.getLogger(__name__)

STATE_FILE = "state.json"
PROTOTYPE_FILE = "prototypes.bin"
OPTIMIZER_FILE = "optimizer.npz"


class CheckpointManager:
    """Persists a FitState as JSON parameters, a prototype blob and an optimizer archive."""

    def __init__(self, directory: str) -> None:
        self.directory: str = directory
        self.state_path: str = os.path.join(directory, STATE_FILE)
        self.prototype_path: str = os.path.join(directory, PROTOTYPE_FILE)
        self.optimizer_path: str = os.path.join(directory, OPTIMIZER_FILE)
        logger.debug("CheckpointManager initialized with directory: %s", self.directory)

    def exists(self) -> bool:
        return os.path.exists(self.state_path)

    def save(self, state: FitState, metadata: Optional[Dict[str, Any]] = None) -> None:
        """Writes the checkpoint, keeping a backup of the previous state file."""
        logger.debug("Saving checkpoint to %s", self.directory)
        data = {
            "version": CHECKPOINT_VERSION,
            "iteration": state.iteration,
            "seed": state.seed,
            "beta": state.beta.tolist(),
            "psi": state.psi.tolist(),
            "global_rotation": state.global_rotation.tolist(),
            "global_translation": state.global_translation.tolist(),
            "neck_rotation": state.neck_rotation.tolist(),
            "lighting": state.lighting.tolist(),
            "reference_log_scale": state.prototypes.reference_log_scale.tolist(),
            "optimizer": {"t": state.optimizer.t, "learning_rates": state.optimizer.learning_rates},
            "stats": {"n_faces": state.stats.n_faces, "t_history": state.stats.t_history},
            "metadata": metadata or {},
        }
        arrays = {f"m/{k}": v for k, v in state.optimizer.m.items()}
        arrays.update({f"v/{k}": v for k, v in state.optimizer.v.items()})
        if state.stats.opacity_window:
            arrays["opacity_window"] = np.stack(state.stats.opacity_window)
            arrays["grad_window"] = np.stack(state.stats.grad_window)
        try:
            os.makedirs(self.directory, exist_ok=True)
            if os.path.exists(self.state_path):
                backup_path = f"{self.state_path}.backup"
                logger.debug("Creating backup of state file at %s.", backup_path)
                shutil.copy(self.state_path, backup_path)
            write_prototypes(state.prototypes, self.prototype_path)
            with open(self.optimizer_path, "wb") as f:
                np.savez(f, **arrays)
            with open(self.state_path, "w") as f:
                json.dump(data, f, indent=2)
            logger.info("Checkpoint saved to %s (iteration %d).", self.directory, state.iteration)
        except IOError as e:
            raise CheckpointError(f"Failed to write checkpoint {self.directory}: {e}") from e

    def load(self) -> Tuple[FitState, Dict[str, Any]]:
        """Reads the checkpoint back; returns the state and the saved metadata."""
        logger.debug("Loading checkpoint from %s", self.directory)
        if not self.exists():
            raise MissingInputError(self.state_path, "checkpoint")
        try:
            with open(self.state_path, "r") as f:
                data = json.load(f)
        except (IOError, json.JSONDecodeError) as e:
            raise CheckpointError(f"Failed to read or parse checkpoint {self.state_path}: {e}") from e
        version = data.get("version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"Checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION}).")
        try:
            prototypes = read_prototypes(self.prototype_path)
            prototypes.reference_log_scale = np.array(data["reference_log_scale"], dtype=np.float64).reshape(-1, 2)
            if len(prototypes.reference_log_scale) != len(prototypes):
                raise CheckpointError("Checkpoint reference scales do not match the prototype count.")

            optimizer = Adam(data["optimizer"]["learning_rates"])
            optimizer.t = int(data["optimizer"]["t"])
            stats = DensifyStats(int(data["stats"]["n_faces"]), int(data["stats"]["t_history"]))
            if os.path.exists(self.optimizer_path):
                with np.load(self.optimizer_path) as archive:
                    for key in archive.files:
                        kind, _, name = key.partition("/")
                        if kind == "m":
                            optimizer.m[name] = archive[key].copy()
                        elif kind == "v":
                            optimizer.v[name] = archive[key].copy()
                    if "opacity_window" in archive.files:
                        stats.opacity_window.extend(archive["opacity_window"].copy())
                        stats.grad_window.extend(archive["grad_window"].copy())

            n_frames = len(data["psi"])
            state = FitState(
                beta=np.array(data["beta"], dtype=np.float64),
                psi=np.array(data["psi"], dtype=np.float64).reshape(n_frames, -1),
                global_rotation=np.array(data["global_rotation"], dtype=np.float64).reshape(n_frames, 4),
                global_translation=np.array(data["global_translation"], dtype=np.float64).reshape(n_frames, 3),
                neck_rotation=np.array(data["neck_rotation"], dtype=np.float64).reshape(n_frames, 4),
                lighting=np.array(data["lighting"], dtype=np.float64),
                prototypes=prototypes,
                optimizer=optimizer,
                stats=stats,
                iteration=int(data["iteration"]),
                seed=int(data["seed"]),
            )
        except (KeyError, ValueError, TypeError) as e:
            raise CheckpointError(f"Checkpoint {self.directory} is incomplete: {e}") from e
        logger.info("Checkpoint loaded from %s (iteration %d).", self.directory, state.iteration)
        return state, data.get("metadata", {})
