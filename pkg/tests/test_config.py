from pathlib import Path

import pytest

from tncompress.config import RunConfig, apply_overrides, load_config, parse_override_value
from tncompress.errors import ConfigError
from tncompress.models import CompressionOrder, ModelName

CONFIGS = Path(__file__).parent.parent / "configs"


def test_defaults():
    config = load_config()
    assert config == RunConfig()
    assert config.compression.pretrain.lr == 1e-3
    assert config.compression.pretrain.window == 50
    assert config.compression.finetune.lr == 1e-4
    assert config.compression.order == CompressionOrder.BACKWARD
    assert config.compression.min_chunk == 256


def test_override_values_use_toml_literals():
    assert parse_override_value("3") == 3
    assert parse_override_value("1e-4") == 1e-4
    assert parse_override_value("true") is True
    assert parse_override_value('["fc1", "fc2"]') == ["fc1", "fc2"]
    assert parse_override_value("/tmp/data") == "/tmp/data"


def test_nested_overrides():
    raw = apply_overrides({"train": {"epochs": 5}}, ["train.epochs=1", "compression.pretrain.max_steps=10"])
    assert raw == {"train": {"epochs": 1}, "compression": {"pretrain": {"max_steps": 10}}}


def test_override_needs_equals_sign():
    with pytest.raises(ConfigError):
        load_config(overrides=["train.epochs"])


def test_override_cannot_descend_into_value():
    with pytest.raises(ConfigError):
        load_config(overrides=["seed=1", "seed.x=2"])


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError, match="pretrian"):
        load_config(overrides=["compression.pretrian.lr=0.1"])


@pytest.mark.parametrize(
    "override",
    ["model.name=vgg16", "compression.M=0", "train.epochs=-1", "data.dataset=svhn", "compression.order=sideways"],
)
def test_invalid_values_are_config_errors(override):
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


def test_toml_file_with_overrides(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('seed = 4\n[model]\nname = "lenet5-mnist"\n[compression]\nlayers = ["fc1"]\nM = 2\n')
    config = load_config(path, ["compression.M=3"])
    assert config.seed == 4
    assert config.model.name == ModelName.LENET5_MNIST
    assert config.compression.layers == ["fc1"]
    assert config.compression.M == 3


def test_missing_and_invalid_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")
    path = tmp_path / "broken.toml"
    path.write_text("seed = = 1")
    with pytest.raises(ConfigError):
        load_config(path)


@pytest.mark.parametrize("name", ["fc2_mnist.toml", "lenet5_orders.toml"])
def test_shipped_configs_validate(name):
    config = load_config(CONFIGS / name)
    assert config.compression.layers


def test_output_and_data_dirs_fall_back_to_settings(monkeypatch):
    from tncompress import config as config_module

    monkeypatch.setattr(config_module.settings, "output_dir", "elsewhere")
    assert load_config().resolved_output_dir == Path("elsewhere")
    assert load_config(overrides=["output_dir=mine"]).resolved_output_dir == Path("mine")
