import json

import pytest

from rig_splat.config import EvalSettings, RenderSettings, RunConfig
from rig_splat.errors import ConfigError, InvalidInputError, MissingInputError


# --- Loading ---
def test_defaults_without_a_file() -> None:
    """Test that no config file gives the documented defaults."""
    config = RunConfig.load(None)
    assert config.fit.iterations == 2000
    assert config.fit.fov_deg == 14.3
    assert config.fit.lr_splats == 1e-3
    assert config.eval.icp_iterations == 10
    assert config.explicit == set()


def test_file_sections_are_applied(tmp_path) -> None:
    """Test nested sections, loss weights and the explicit-key record."""
    path = tmp_path / "config.json"
    path.write_text(json.dumps({
        "fit": {"iterations": 12, "weights": {"w_depth": 0.5}, "background": [1, 1, 1]},
        "synth": {"n_frames": 2},
        "eval": {"metrical": True},
        "seed": 3,
    }))
    config = RunConfig.load(str(path))
    assert config.fit.iterations == 12
    assert config.fit.weights.w_depth == 0.5 and config.fit.weights.w_l1 == 1.0
    assert config.fit.background == (1.0, 1.0, 1.0)
    assert config.synth.n_frames == 2
    assert config.eval.metrical
    assert config.seed == 3 and config.fit.seed == 3 and config.synth.seed == 3
    assert {"fit.iterations", "fit.weights", "synth.n_frames", "eval.metrical"} <= config.explicit


@pytest.mark.parametrize("data, field", [
    ({"fit": {"iteratons": 5}}, "fit.iteratons"),
    ({"fit": {"weights": {"w_bogus": 1.0}}}, "fit.weights.w_bogus"),
    ({"render": {"zoom": 2}}, "render.zoom"),
    ({"colour": {}}, "colour"),
])
def test_unknown_keys_name_the_field(data, field) -> None:
    """Test that a misspelt key is rejected with its dotted name."""
    with pytest.raises(ConfigError) as excinfo:
        RunConfig.from_dict(data)
    assert excinfo.value.field == field


def test_invalid_values_are_config_errors() -> None:
    with pytest.raises(ConfigError, match="lr_pose"):
        RunConfig.from_dict({"fit": {"lr_pose": -1.0}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"eval": {"mesh_units": "inch"}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"fit": "fast"})


def test_missing_and_malformed_files(tmp_path) -> None:
    with pytest.raises(MissingInputError):
        RunConfig.load(str(tmp_path / "absent.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(InvalidInputError):
        RunConfig.load(str(bad))


# --- Overrides ---
def test_flags_override_file_values() -> None:
    """Test that non-None overrides win and None values are ignored."""
    config = RunConfig.from_dict({"fit": {"iterations": 12, "lr_shape": 0.5}})
    config.override("fit", iterations=3, lr_shape=None)
    assert config.fit.iterations == 3
    assert config.fit.lr_shape == 0.5
    assert "fit.iterations" in config.explicit


def test_override_rejects_unknown_field() -> None:
    config = RunConfig()
    with pytest.raises(ConfigError, match="fit.speed"):
        config.override("fit", speed=2)


def test_threads_and_seed() -> None:
    with pytest.raises(ConfigError):
        RunConfig(threads=0)
    config = RunConfig()
    config.set_seed(9)
    assert config.fit.seed == 9 and config.synth.seed == 9


def test_dict_round_trip() -> None:
    """Test that to_dict feeds back into from_dict unchanged."""
    config = RunConfig.from_dict({"fit": {"iterations": 7}, "render": {"rotation_deg": [0, 0, 10]}})
    again = RunConfig.from_dict(config.to_dict())
    assert again.to_dict() == config.to_dict()


# --- Sections ---
def test_render_settings_validation() -> None:
    with pytest.raises(ConfigError):
        RenderSettings(rotation_deg=[1.0, 2.0])
    with pytest.raises(ConfigError):
        RenderSettings(frame=-1)


def test_mesh_units_scale() -> None:
    assert EvalSettings().mesh_scale == 1000.0
    assert EvalSettings(mesh_units="mm").mesh_scale == 1.0
