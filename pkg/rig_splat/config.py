"""Run configuration: one JSON file with a section per subcommand, overridden by command-line flags."""
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Set

from .errors import ConfigError
from .fit_engine import FitConfig
from .image_io import read_json
from .objective import LossWeights
from .synth import SynthSpec

# --- Logger Setup ---
logger = logging.getLogger(__name__)

MESH_UNITS = {"m": 1000.0, "mm": 1.0}


@dataclass
class RenderSettings:
    frame: int = 0
    drive_frame: Optional[int] = None
    resolution: Optional[int] = None
    fov_deg: Optional[float] = None
    expression: Optional[List[float]] = None
    rotation_deg: Optional[List[float]] = None
    translation: Optional[List[float]] = None
    background: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])

    def __post_init__(self) -> None:
        if self.frame < 0:
            raise ConfigError("render.frame", "must be nonnegative")
        if self.drive_frame is not None and self.drive_frame < 0:
            raise ConfigError("render.drive_frame", "must be nonnegative")
        if self.resolution is not None and self.resolution < 8:
            raise ConfigError("render.resolution", "must be at least 8")
        for name in ("rotation_deg", "translation", "background"):
            value = getattr(self, name)
            if value is not None and len(value) != 3:
                raise ConfigError(f"render.{name}", "needs three values")


@dataclass
class EvalSettings:
    metrical: bool = False
    icp_iterations: int = 10
    mesh_units: str = "m"

    def __post_init__(self) -> None:
        if self.icp_iterations < 0:
            raise ConfigError("eval.icp_iterations", "must be nonnegative")
        if self.mesh_units not in MESH_UNITS:
            raise ConfigError("eval.mesh_units", f"expected one of {sorted(MESH_UNITS)}")

    @property
    def mesh_scale(self) -> float:
        """Factor taking mesh coordinates to millimetres."""
        return MESH_UNITS[self.mesh_units]


SECTIONS = {"fit": FitConfig, "synth": SynthSpec, "render": RenderSettings, "eval": EvalSettings}


def _check_keys(data: Dict[str, Any], cls: type, prefix: str) -> None:
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{prefix}{key}", "unknown key")


def _build(cls: type, data: Dict[str, Any], section: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(section, "must be a JSON object")
    _check_keys(data, cls, f"{section}.")
    data = dict(data)
    if cls is FitConfig and "weights" in data:
        if not isinstance(data["weights"], dict):
            raise ConfigError("fit.weights", "must be a JSON object")
        _check_keys(data["weights"], LossWeights, "fit.weights.")
        data["weights"] = _construct(LossWeights, data["weights"], "fit.weights")
    if cls is FitConfig and "background" in data:
        data["background"] = tuple(data["background"])
    return _construct(cls, data, section)


def _construct(cls: type, data: Dict[str, Any], section: str) -> Any:
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(section, f"invalid value: {e}") from e


@dataclass
class RunConfig:
    fit: FitConfig = field(default_factory=FitConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    render: RenderSettings = field(default_factory=RenderSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    seed: Optional[int] = None
    threads: Optional[int] = None

    def __post_init__(self) -> None:
        # "section.key" names set by the config file or by flags
        self.explicit: Set[str] = set()
        if self.threads is not None:
            self.set_threads(self.threads)
        if self.seed is not None:
            self.set_seed(self.seed)

    def set_threads(self, threads: int) -> None:
        if threads < 1:
            raise ConfigError("threads", "must be at least 1")
        self.threads = int(threads)

    def set_seed(self, seed: int) -> None:
        """One run seed drives every section."""
        self.seed = int(seed)
        self.fit = replace(self.fit, seed=self.seed)
        self.synth = replace(self.synth, seed=self.seed)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "configuration must be a JSON object")
        _check_keys(data, cls, "")
        sections = {name: _build(SECTIONS[name], data[name], name) for name in SECTIONS if name in data}
        config = _construct(cls, dict(sections, seed=data.get("seed"), threads=data.get("threads")), "<root>")
        config.explicit = {f"{name}.{key}" for name in sections for key in data[name]}
        return config

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        if path is None:
            return cls()
        config = cls.from_dict(read_json(path, "config file"))
        logger.info("Configuration loaded from %s.", path)
        return config

    def override(self, section: str, **values: Any) -> None:
        """Replaces fields of one section with the non-None values given (flags win over the file)."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return
        current = getattr(self, section)
        _check_keys(values, type(current), f"{section}.")
        try:
            setattr(self, section, replace(current, **values))
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(section, f"invalid value: {e}") from e
        self.explicit.update(f"{section}.{key}" for key in values)
        logger.debug("Overrode %s fields: %s", section, sorted(values))

    def to_dict(self) -> Dict[str, Any]:
        data = {name: asdict(getattr(self, name)) for name in SECTIONS}
        data["fit"]["background"] = list(self.fit.background)
        data["seed"] = self.seed
        data["threads"] = self.threads
        return data
