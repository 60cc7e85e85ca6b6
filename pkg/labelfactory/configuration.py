""" Module for loading and validating the factory configuration """

import copy
import logging
import os

from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Optional

import yaml

LOG = logging.getLogger(__name__)

GENERATOR_SECTION = "generator"
DISCRIMINATOR_SECTION = "discriminator"
EMBEDDER_SECTION = "embedder"
ADAPT_SECTION = "adapt"
LABEL_SECTION = "label"
DETECTOR_SECTION = "detector"
DATA_SECTION = "data"
EVAL_SECTION = "eval"

EMBEDDER_WEIGHTS_ENV = "FACTORY_EMBEDDER_WEIGHTS"
EMBEDDER_KINDS = ("toy", "external")
LABEL_OPTIMIZERS = ("sgd", "adam")

# Layer count of the full-size backbone on which the reference deep/shallow layer sets are indexed
REFERENCE_DEPTH = 14


class ConfigurationError(Exception):
    """ Exception raised for invalid or inconsistent configuration.

    Attributes:
        message: explanation of the error
        key: dotted configuration key at fault, if known
    """

    def __init__(self, message: str, key: Optional[str] = None) -> None:
        self.message = message
        self.key = key
        if key:
            super().__init__(f"[{key}] {message}")
        else:
            super().__init__(message)


@dataclass
class GeneratorConfig:
    """ Style-based generator architecture and source pretraining settings """
    num_layers: int = 6
    z_dim: int = 512
    w_dim: int = 512
    channels: list[int] = field(default_factory=lambda: [256, 256, 128, 64, 32, 16])
    mapping_layers: int = 2
    w_avg_decay: float = 0.995
    pretrained_path: Optional[str] = None
    pretrain_iters: int = 3000
    pretrain_batch: int = 16
    pretrain_lr: float = 0.002

    @property
    def resolution(self) -> int:
        """ Output image side, 4 doubled once per layer after the first """
        return 2 ** (self.num_layers + 1)


@dataclass
class DiscriminatorConfig:
    """ Shared-trunk image/patch discriminator settings """
    # Trunk widths per downsampling block; None mirrors the generator widths
    channels: Optional[list[int]] = None
    patch_tap_layer: Optional[int] = None
    pretrained_path: Optional[str] = None


@dataclass
class EmbedderConfig:
    """ Joint image-text embedder selection """
    kind: str = "toy"
    dim: int = 128
    seed: int = 0
    weights_path: Optional[str] = None


@dataclass
class AdaptConfig:
    """ Generator adaptation schedule (the adapt.* keys) """
    total_iters: int = 1000
    batch_size: int = 4
    lr: float = 0.002
    lambda_1: float = 1.0
    lambda_2: float = 1.0
    lambda_f: int = 2
    phase_switch_iter: int = 500
    deep_layers: Optional[list[int]] = None
    shallow_layers: Optional[list[int]] = None
    anchor_sigma: float = 0.05
    use_anchors: bool = True
    use_text: bool = True
    use_fewshot: bool = True
    freeze: bool = True
    trainable_from: int = 3
    augment: bool = True
    r1_gamma: float = 0.0
    log_every: int = 50


@dataclass
class LabelConfig:
    """ Label-synthesis branch settings (the label.* keys) """
    capture_layers: Optional[list[int]] = None
    stride: int = 1
    hidden_channels: int = 64
    iters: int = 1000
    lr: float = 1e-4
    weight_decay: float = 1e-4
    momentum: float = 0.9
    optimizer: str = "sgd"
    lambda_off: float = 1.0
    lambda_size: float = 0.5
    focal_alpha: float = 2.0
    focal_beta: float = 4.0
    min_overlap: float = 0.7
    score_thresh: float = 0.6
    max_dets: int = 32
    n_annotated: int = 10
    annotations_path: Optional[str] = None


@dataclass
class DetectorConfig:
    """ Compact keypoint detector training settings """
    width: int = 32
    pretrain_iters: int = 1500
    finetune_iters: int = 500
    batch_size: int = 16
    lr: float = 1e-3
    finetune_lr: float = 5e-4
    weight_decay: float = 1e-4
    n_source: int = 400
    pretrained_path: Optional[str] = None


@dataclass
class DataConfig:
    """ Procedural domains and few-shot inputs """
    source_style: str = "source"
    target_style: str = "outline"
    fewshot_dir: Optional[str] = None
    n_fewshot: int = 12
    n_target_test: int = 200


@dataclass
class EvalConfig:
    """ Metric settings (the eval.* keys) """
    iou_thresh: float = 0.5
    score_thresh: float = 0.05
    n_diversity: int = 50
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    sweep_samples: list[int] = field(default_factory=lambda: [25, 50, 100, 200])
    sweep_shots: list[int] = field(default_factory=lambda: [1, 5, 12])


@dataclass
class FactoryConfig:
    """ Full hyperparameter record of a factory run """
    seed: int = 0
    source_text: str = "a photo of gray shapes"
    target_text: str = "a comic drawing of colorful outlined shapes"
    class_names: list[str] = field(default_factory=lambda: ["circle", "square", "triangle"])
    n_synth: int = 200
    psi: float = 0.7
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    label: LabelConfig = field(default_factory=LabelConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @classmethod
    def from_dict(cls, raw: Optional[dict], overrides: Optional[list[str]] = None) -> "FactoryConfig":
        """
        Build a validated config from a (possibly partial) nested dictionary.

        Args:
            raw: Nested dictionary as loaded from the config file
            overrides: Dotted ``key=value`` strings applied on top of ``raw``

        Returns:
            FactoryConfig with defaults for every missing key

        Raises:
            ConfigurationError: On unknown keys or invalid values
        """
        merged = copy.deepcopy(raw) if raw else {}
        if not isinstance(merged, dict):
            raise ConfigurationError("Config root must be a mapping")

        for override in overrides or []:
            key, value = parse_override(override)
            set_dotted(merged, key, value)

        config = _build_dataclass(cls, merged, prefix="")

        weights_env = os.environ.get(EMBEDDER_WEIGHTS_ENV)
        if weights_env:
            LOG.debug("Embedder weights taken from %s", EMBEDDER_WEIGHTS_ENV)
            config.embedder.weights_path = weights_env

        config.validate()
        return config

    def to_dict(self) -> dict:
        """ Plain nested dictionary, suitable for JSON and for ``from_dict`` """
        return asdict(self)

    def with_overrides(self, overrides: list[str]) -> "FactoryConfig":
        """ Validated copy with dotted ``key=value`` overrides applied """
        return FactoryConfig.from_dict(self.to_dict(), overrides)

    def validate(self) -> None:
        """ Check cross-field invariants, raising ConfigurationError on the first violation """

        gen = self.generator
        if gen.num_layers < 2:
            raise ConfigurationError("At least 2 synthesis layers are required", "generator.num_layers")
        if len(gen.channels) != gen.num_layers:
            raise ConfigurationError(
                f"Expected {gen.num_layers} channel widths, got {len(gen.channels)}",
                "generator.channels"
            )
        if gen.z_dim < 1 or gen.w_dim < 1:
            raise ConfigurationError("Latent dimensions must be positive", "generator.z_dim")
        if not 0.0 <= gen.w_avg_decay < 1.0:
            raise ConfigurationError("EMA decay must lie in [0, 1)", "generator.w_avg_decay")

        disc = self.discriminator
        n_blocks = gen.num_layers - 1
        if disc.channels is not None and len(disc.channels) != n_blocks:
            raise ConfigurationError(
                f"Expected {n_blocks} trunk widths, got {len(disc.channels)}",
                "discriminator.channels"
            )
        if disc.patch_tap_layer is not None and not 1 <= disc.patch_tap_layer <= n_blocks:
            raise ConfigurationError(
                f"Patch tap must be a trunk block in [1, {n_blocks}]",
                "discriminator.patch_tap_layer"
            )

        if self.embedder.kind not in EMBEDDER_KINDS:
            raise ConfigurationError(
                f"Unknown embedder kind '{self.embedder.kind}', expected one of {EMBEDDER_KINDS}",
                "embedder.kind"
            )

        adapt = self.adapt
        if adapt.lambda_f < 1:
            raise ConfigurationError("Alternation period must be >= 1", "adapt.lambda_f")
        if not 0 <= adapt.phase_switch_iter <= adapt.total_iters:
            raise ConfigurationError(
                f"Phase switch must lie in [0, {adapt.total_iters}]", "adapt.phase_switch_iter"
            )
        if adapt.batch_size < 2:
            raise ConfigurationError("Distance consistency needs a batch of at least 2", "adapt.batch_size")
        if not 1 <= adapt.trainable_from <= gen.num_layers + 1:
            raise ConfigurationError(
                f"First trainable layer must lie in [1, {gen.num_layers + 1}]", "adapt.trainable_from"
            )
        for key, layers in (("adapt.deep_layers", adapt.deep_layers),
                            ("adapt.shallow_layers", adapt.shallow_layers)):
            if layers is not None and any(not 1 <= m <= gen.num_layers for m in layers):
                raise ConfigurationError(f"Layer indices must lie in [1, {gen.num_layers}]", key)

        label = self.label
        if label.optimizer not in LABEL_OPTIMIZERS:
            raise ConfigurationError(
                f"Unknown optimizer '{label.optimizer}', expected one of {LABEL_OPTIMIZERS}",
                "label.optimizer"
            )
        if label.stride < 1 or gen.resolution % label.stride != 0:
            raise ConfigurationError(
                f"Stride must divide the image side {gen.resolution}", "label.stride"
            )
        if label.capture_layers is not None and any(
                not 1 <= m <= gen.num_layers for m in label.capture_layers):
            raise ConfigurationError(
                f"Capture layers must lie in [1, {gen.num_layers}]", "label.capture_layers"
            )
        if not 0.0 < label.min_overlap < 1.0:
            raise ConfigurationError("Minimum overlap must lie in (0, 1)", "label.min_overlap")

        if not 0.0 <= self.psi <= 1.0:
            raise ConfigurationError("Truncation psi must lie in [0, 1]", "psi")
        if not self.class_names:
            raise ConfigurationError("At least one class name is required", "class_names")
        if self.source_text == self.target_text:
            raise ConfigurationError("Source and target text must differ", "target_text")
        if self.n_synth < 1:
            raise ConfigurationError("n_synth must be positive", "n_synth")

    # Derived layer sets -------------------------------------------------

    def deep_layers(self) -> list[int]:
        if self.adapt.deep_layers is not None:
            return sorted(self.adapt.deep_layers)
        return remap_reference_layers(self.generator.num_layers)[0]

    def shallow_layers(self) -> list[int]:
        if self.adapt.shallow_layers is not None:
            return sorted(self.adapt.shallow_layers)
        return remap_reference_layers(self.generator.num_layers)[1]

    def capture_layers(self) -> list[int]:
        """ Label-branch capture layers: every layer but the output one unless configured """
        if self.label.capture_layers is not None:
            return sorted(self.label.capture_layers)
        return list(range(1, self.generator.num_layers))

    def trainable_layers(self) -> list[int]:
        if not self.adapt.freeze:
            return list(range(1, self.generator.num_layers + 1))
        return list(range(self.adapt.trainable_from, self.generator.num_layers + 1))


def remap_reference_layers(num_layers: int, reference_depth: int = REFERENCE_DEPTH) -> tuple[list[int], list[int]]:
    """
    Map the reference deep set {m > 6} and shallow set {m < 10} onto a
    generator with ``num_layers`` layers, scaling indices proportionally.

    Returns:
        (deep_layers, shallow_layers), each non-empty
    """
    scale = reference_depth / num_layers
    deep = [m for m in range(1, num_layers + 1) if m * scale > 6]
    shallow = [m for m in range(1, num_layers + 1) if m * scale < 10]
    # Very shallow generators still get one layer per phase
    return deep or [num_layers], shallow or [1]


def parse_override(override: str) -> tuple[str, Any]:
    """ Split ``a.b=value`` into the dotted key and a YAML-typed value """
    if "=" not in override:
        raise ConfigurationError(f"Override '{override}' must have the form key=value")
    key, raw_value = override.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigurationError(f"Override '{override}' has an empty key")
    try:
        value = yaml.safe_load(raw_value) if raw_value.strip() else None
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Could not parse value '{raw_value}': {e}", key) from e
    return key, value


def set_dotted(data: dict, key: str, value: Any) -> None:
    """ Assign ``value`` at a dotted path, creating intermediate sections """
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigurationError(f"'{part}' is not a section", key)
        node = child
    node[parts[-1]] = value


def _build_dataclass(cls, raw: dict, prefix: str):
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigurationError("Unknown configuration key", f"{prefix}{key}")

    kwargs = {}
    for name, f in known.items():
        if name not in raw:
            continue
        value = raw[name]
        default = f.default_factory() if f.default_factory is not MISSING else f.default
        if is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigurationError("Expected a section", f"{prefix}{name}")
            kwargs[name] = _build_dataclass(type(default), value, prefix=f"{prefix}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(filepath: str) -> dict:
    """ Load the raw configuration mapping from a JSON or YAML file """

    config_path = Path(filepath)
    if not config_path.exists():
        LOG.error("Config file %s does not exist", config_path)
        raise FileNotFoundError(f"Config file {config_path} does not exist")

    with open(config_path, 'r', encoding="utf8") as config_file:
        try:
            config_data = yaml.safe_load(config_file)
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Could not parse {config_path}: {e}") from e

    return config_data or {}


def load_factory_config(filepath: Optional[str], overrides: Optional[list[str]] = None) -> FactoryConfig:
    """ Load, merge and validate a FactoryConfig; ``filepath=None`` uses defaults only """
    raw = load_config(filepath) if filepath else {}
    return FactoryConfig.from_dict(raw, overrides)
