""" Unit tests for configuration.py """

import json

from pathlib import Path

import pytest
import yaml

from labelfactory.configuration import (
    EMBEDDER_WEIGHTS_ENV,
    REFERENCE_DEPTH,
    ConfigurationError,
    FactoryConfig,
    load_config,
    load_factory_config,
    parse_override,
    remap_reference_layers,
    set_dotted,
)


def test_load_config_valid_file(test_config):
    """Test loading a JSON configuration file through the YAML loader"""
    config = load_config(str(test_config))

    assert isinstance(config, dict)
    assert config["generator"]["num_layers"] == 3


def test_load_config_missing_file():
    """Test that loading a non-existent config file raises FileNotFoundError with the path"""
    with pytest.raises(FileNotFoundError, match="/nonexistent/config.json"):
        load_config("/nonexistent/config.json")


def test_load_config_invalid_yaml(tmp_path):
    """Test handling of malformed input"""
    invalid_config = tmp_path / "invalid.yaml"
    invalid_config.write_text("{ invalid yaml content: [")

    with pytest.raises(ConfigurationError, match="Could not parse"):
        load_config(str(invalid_config))


def test_load_config_empty_file(tmp_path):
    """Test loading an empty config file"""
    empty_config = tmp_path / "empty.yaml"
    empty_config.write_text("")

    assert load_config(str(empty_config)) == {}


def test_defaults_are_valid():
    """Test that the default configuration passes validation"""
    config = FactoryConfig.from_dict({})

    assert config.generator.resolution == 2 ** 7
    assert config.num_classes == 3
    assert config.trainable_layers() == [3, 4, 5, 6]


def test_shipped_config_keeps_label_head_defaults():
    """Test that the repository config trains and decodes the label head with the default settings"""
    shipped = load_factory_config(str(Path(__file__).parents[2] / "config.json"))
    defaults = FactoryConfig.from_dict({}).label

    assert shipped.label.optimizer == defaults.optimizer == "sgd"
    assert shipped.label.lr == defaults.lr == pytest.approx(1e-4)
    assert shipped.label.score_thresh == defaults.score_thresh == pytest.approx(0.6)


def test_to_dict_round_trip(tiny_config):
    """Test that to_dict feeds back through from_dict unchanged"""
    assert FactoryConfig.from_dict(tiny_config.to_dict()) == tiny_config


def test_to_dict_is_json_serializable(tiny_config):
    """Test full serializability of the config"""
    assert json.loads(json.dumps(tiny_config.to_dict())) == tiny_config.to_dict()


def test_unknown_key_names_dotted_path(tiny_config_dict):
    """Test that unknown keys are rejected with their dotted key"""
    tiny_config_dict["adapt"]["lambda_3"] = 1.0

    with pytest.raises(ConfigurationError) as exc_info:
        FactoryConfig.from_dict(tiny_config_dict)

    assert exc_info.value.key == "adapt.lambda_3"


def test_unknown_section():
    """Test that an unknown top-level key is rejected"""
    with pytest.raises(ConfigurationError, match="output_dir"):
        FactoryConfig.from_dict({"output_dir": "out"})


def test_section_must_be_mapping():
    """Test that a scalar in place of a section is rejected"""
    with pytest.raises(ConfigurationError, match="Expected a section"):
        FactoryConfig.from_dict({"adapt": 3})


@pytest.mark.parametrize("overrides,key", [
    (["adapt.lambda_f=0"], "adapt.lambda_f"),
    (["adapt.phase_switch_iter=5000"], "adapt.phase_switch_iter"),
    (["psi=1.5"], "psi"),
    (["generator.channels=[8, 8]"], "generator.channels"),
    (["adapt.batch_size=1"], "adapt.batch_size"),
    (["label.stride=3"], "label.stride"),
    (["label.optimizer=rmsprop"], "label.optimizer"),
    (["embedder.kind=clip"], "embedder.kind"),
    (["target_text=a photo of gray shapes"], "target_text"),
    (["adapt.deep_layers=[0]"], "adapt.deep_layers"),
    (["discriminator.patch_tap_layer=9"], "discriminator.patch_tap_layer"),
])
def test_invalid_values(tiny_config_dict, overrides, key):
    """Test that invariant violations raise ConfigurationError naming the key"""
    with pytest.raises(ConfigurationError) as exc_info:
        FactoryConfig.from_dict(tiny_config_dict, overrides)

    assert exc_info.value.key == key


def test_overrides_are_yaml_typed(tiny_config_dict):
    """Test dotted overrides with typed values"""
    config = FactoryConfig.from_dict(tiny_config_dict, [
        "adapt.lambda_1=0.25",
        "adapt.use_text=false",
        "label.capture_layers=[1, 3]",
        "seed=7",
    ])

    assert config.adapt.lambda_1 == 0.25
    assert config.adapt.use_text is False
    assert config.capture_layers() == [1, 3]
    assert config.seed == 7


def test_with_overrides_leaves_original(tiny_config):
    """Test that with_overrides returns a modified copy"""
    changed = tiny_config.with_overrides(["n_synth=2"])

    assert changed.n_synth == 2
    assert tiny_config.n_synth == 6


def test_parse_override_requires_equals():
    """Test override syntax errors"""
    with pytest.raises(ConfigurationError, match="key=value"):
        parse_override("adapt.lambda_1")

    with pytest.raises(ConfigurationError, match="empty key"):
        parse_override("=3")


def test_parse_override_empty_value_is_none():
    """Test that an empty right-hand side clears a key"""
    assert parse_override("label.annotations_path=") == ("label.annotations_path", None)


def test_set_dotted_rejects_scalar_parent():
    """Test that a dotted path through a scalar fails"""
    data = {"psi": 0.5}

    with pytest.raises(ConfigurationError, match="not a section"):
        set_dotted(data, "psi.value", 1)


def test_embedder_weights_env(monkeypatch, tiny_config_dict):
    """Test that the environment variable overrides embedder.weights_path"""
    monkeypatch.setenv(EMBEDDER_WEIGHTS_ENV, "/models/embedder.pt")

    config = FactoryConfig.from_dict(tiny_config_dict)

    assert config.embedder.weights_path == "/models/embedder.pt"


def test_load_factory_config_without_file():
    """Test that a missing path means defaults plus overrides"""
    config = load_factory_config(None, ["seed=3"])

    assert config.seed == 3


def test_load_factory_config_yaml(tmp_path, tiny_config_dict):
    """Test that YAML config files are accepted too"""
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(tiny_config_dict))

    config = load_factory_config(str(path))

    assert config.generator.z_dim == 16


class TestLayerRemap:
    """Tests for mapping the reference deep/shallow sets onto shorter generators"""

    def test_reference_depth_is_identity(self):
        """At the reference depth the sets are {7..14} and {1..9}"""
        deep, shallow = remap_reference_layers(REFERENCE_DEPTH)

        assert deep == list(range(7, 15))
        assert shallow == list(range(1, 10))

    def test_six_layers(self):
        """Test the default generator depth"""
        deep, shallow = remap_reference_layers(6)

        assert deep == [3, 4, 5, 6]
        assert shallow == [1, 2, 3, 4]

    def test_tiny_generator(self, tiny_config):
        """Test the derived sets for a 3-layer generator"""
        assert tiny_config.deep_layers() == [2, 3]
        assert tiny_config.shallow_layers() == [1, 2]

    @pytest.mark.parametrize("num_layers", [1, 2, 3, 5, 8, 14, 20])
    def test_sets_never_empty(self, num_layers):
        """Every depth gets at least one layer per phase"""
        deep, shallow = remap_reference_layers(num_layers)

        assert deep and shallow
        assert all(1 <= m <= num_layers for m in deep + shallow)

    def test_explicit_layers_win(self, tiny_config_dict):
        """Configured layer sets override the remap"""
        config = FactoryConfig.from_dict(tiny_config_dict, ["adapt.deep_layers=[3, 1]"])

        assert config.deep_layers() == [1, 3]


def test_trainable_layers_without_freeze(tiny_config_dict):
    """Test that disabling the freeze trains every synthesis layer"""
    config = FactoryConfig.from_dict(tiny_config_dict, ["adapt.freeze=false"])

    assert config.trainable_layers() == [1, 2, 3]


def test_default_capture_layers(tiny_config):
    """Test that the output layer is excluded from the default capture set"""
    assert tiny_config.capture_layers() == [1, 2]
