import json

import pytest

from ptycho_nlos.config import ReconConfig, RunConfig, config_digest, default_run_config, load_config, parse_config
from ptycho_nlos.enums import FrameOrder, TargetKind
from ptycho_nlos.exception import ConfigException
from ptycho_nlos.pipeline import build_scene


def _minimal():
    return {"scene": {"layers": [{"target": {"kind": "text", "text": "A"}, "depth": 0.5}]}}


def test_defaults():
    config = parse_config(RunConfig, _minimal())

    assert config.acquisition.grid == (256, 256)
    assert config.acquisition.pitch == 32e-6
    assert config.acquisition.defocus_d == 0.75e-3
    assert config.recovery.reconstruction.frame_order == FrameOrder.SHUFFLED
    assert config.recovery.reconstruction.iterations == 60
    assert config.analysis.delta_z == [2e-3, 22e-3, 42e-3, 52e-3]
    assert config.scene.layers[0].target.kind == TargetKind.TEXT


def test_surface_seed_falls_back_to_run_seed():
    data = _minimal() | {"seed": 7}

    assert parse_config(RunConfig, data).surface_seed == 7

    data["scene"]["coded_surface"] = {"seed": 3}
    assert parse_config(RunConfig, data).surface_seed == 3


def test_error_names_every_field():
    data = _minimal()
    data["acquisition"] = {"pitch": -1.0, "rows": 0}

    with pytest.raises(ConfigException) as exc_info:
        parse_config(RunConfig, data)

    message = str(exc_info.value)
    assert "acquisition.pitch" in message
    assert "acquisition.rows" in message


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigException, match="unexpected"):
        parse_config(RunConfig, _minimal() | {"unexpected": 1})


def test_scene_needs_a_layer():
    with pytest.raises(ConfigException, match="scene.layers"):
        parse_config(RunConfig, {"scene": {"layers": []}})


@pytest.mark.parametrize("field, value", [("gamma", 2.5), ("beta", -0.1), ("iterations", -1), ("batch_size", 0)])
def test_reconstruction_ranges(field, value):
    with pytest.raises(ConfigException, match=field):
        parse_config(ReconConfig, {field: value})


def test_missing_image_file(tmp_path):
    data = {"scene": {"layers": [{"target": {"kind": "image_file", "path": str(tmp_path / "none.png")}, "depth": 0.5}]}}

    with pytest.raises(ConfigException, match="does not exist"):
        parse_config(RunConfig, data)


def test_load_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(_minimal()))

    assert load_config(path).scene.layers[0].depth == 0.5


def test_load_missing_config(tmp_path):
    with pytest.raises(ConfigException, match="not found"):
        load_config(tmp_path / "absent.json")


def test_load_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")

    with pytest.raises(ConfigException, match="not valid JSON"):
        load_config(path)


def test_digest_is_stable_and_sensitive():
    first = parse_config(RunConfig, _minimal())
    second = parse_config(RunConfig, _minimal())

    assert config_digest(first) == config_digest(second)
    assert len(config_digest(first)) == 64
    assert config_digest(first) != config_digest(first.model_copy(update={"seed": 1}))


def test_default_scene_builds():
    config = default_run_config()

    scene = build_scene(config)

    assert [layer.depth for layer in scene.layers] == [0.4, 0.52, 0.65, 1.65]
    assert all(layer.reflectance.shape == (128, 128) for layer in scene.layers)
    assert all(layer.reflectance.data.real.any() for layer in scene.layers)
    assert len(scene.trajectory) == 121
    assert scene.coded_surface.profile.shape == (256, 256)


def test_tilted_layer_is_split():
    data = _minimal()
    data["scene"]["layers"][0] |= {"depth_end": 0.6, "strips": 5}

    scene = build_scene(parse_config(RunConfig, data))

    assert [layer.depth for layer in scene.layers] == pytest.approx([0.5, 0.525, 0.55, 0.575, 0.6])
