""" Compact style-based generator with per-layer feature capture """

import copy
import logging
import math

from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import torch
import torch.nn.functional as F

from torch import Tensor, nn

from labelfactory.configuration import ConfigurationError, GeneratorConfig

LOG = logging.getLogger(__name__)

LRELU_GAIN = math.sqrt(2.0)

# Mapped style vectors; kept as plain tensors of shape [batch, w_dim]
StyleCode = Tensor


@dataclass
class LatentCode:
    """ Input noise vector z together with the seed it was drawn from """
    values: Tensor
    seed: int

    @classmethod
    def from_seed(cls, seed: int, z_dim: int) -> "LatentCode":
        rng = torch.Generator().manual_seed(seed)
        return cls(values=torch.randn(z_dim, generator=rng), seed=seed)


@dataclass
class SynthesisResult:
    """ Generated images in [-1, 1] plus the captured per-layer feature maps """
    image: Tensor
    features: dict[int, Tensor] = field(default_factory=dict)


def stack_latents(codes: Iterable[LatentCode]) -> Tensor:
    return torch.stack([code.values for code in codes])


def normalize_2nd_moment(x: Tensor, eps: float = 1e-8) -> Tensor:
    return x * torch.rsqrt((x * x).mean(dim=1, keepdim=True) + eps)


def truncate(w: StyleCode, w_avg: Tensor, psi: float) -> StyleCode:
    """ Interpolate ``w`` toward ``w_avg``: w_avg + psi * (w - w_avg) """
    if not 0.0 <= psi <= 1.0:
        raise ValueError(f"Truncation psi must lie in [0, 1], got {psi}")
    if psi == 1.0:
        return w
    if psi == 0.0:
        return w_avg.expand_as(w).clone()
    return w_avg + psi * (w - w_avg)


class EqualLinear(nn.Module):
    """ Fully connected layer with equalized learning rate """

    def __init__(self, in_features: int, out_features: int, bias_init: float = 0.0,
                 lr_multiplier: float = 1.0, activation: bool = False,
                 rng: Optional[torch.Generator] = None):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features, generator=rng) / lr_multiplier)
        self.bias = nn.Parameter(torch.full([out_features], float(bias_init)))
        self.weight_gain = lr_multiplier / math.sqrt(in_features)
        self.bias_gain = lr_multiplier
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        x = F.linear(x, self.weight * self.weight_gain, self.bias * self.bias_gain)
        if self.activation:
            x = F.leaky_relu(x, 0.2) * LRELU_GAIN
        return x


class MappingNetwork(nn.Module):
    """ z -> w multilayer perceptron """

    def __init__(self, z_dim: int, w_dim: int, num_layers: int = 2,
                 lr_multiplier: float = 0.01, rng: Optional[torch.Generator] = None):
        super().__init__()
        dims = [z_dim] + [w_dim] * num_layers
        self.fcs = nn.ModuleList(
            EqualLinear(dims[i], dims[i + 1], lr_multiplier=lr_multiplier, activation=True, rng=rng)
            for i in range(num_layers)
        )

    def forward(self, z: Tensor) -> Tensor:
        x = normalize_2nd_moment(z)
        for layer in self.fcs:
            x = layer(x)
        return x


class ModulatedConv2d(nn.Module):
    """ Style-modulated convolution, modulation applied to the activations """

    def __init__(self, in_channels: int, out_channels: int, w_dim: int, kernel_size: int = 3,
                 demodulate: bool = True, rng: Optional[torch.Generator] = None):
        super().__init__()
        self.affine = EqualLinear(w_dim, in_channels, bias_init=1.0, rng=rng)
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size, generator=rng))
        self.weight_gain = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        self.padding = kernel_size // 2
        self.demodulate = demodulate

    def forward(self, x: Tensor, w: Tensor) -> Tensor:
        styles = self.affine(w)
        weight = self.weight * self.weight_gain

        x = x * styles[:, :, None, None]
        x = F.conv2d(x, weight, padding=self.padding)

        if self.demodulate:
            per_sample = weight.unsqueeze(0) * styles[:, None, :, None, None]
            dcoefs = torch.rsqrt(per_sample.pow(2).sum(dim=[2, 3, 4]) + 1e-8)
            x = x * dcoefs[:, :, None, None]
        return x


class SynthesisLayer(nn.Module):
    """ One resolution level: (const | 2x upsample) -> modulated conv -> lrelu, plus its RGB skip """

    def __init__(self, index: int, in_channels: int, out_channels: int, w_dim: int,
                 rng: Optional[torch.Generator] = None):
        super().__init__()
        self.index = index
        self.resolution = 2 ** (index + 1)
        if index == 1:
            self.const = nn.Parameter(torch.randn(1, out_channels, 4, 4, generator=rng))
            in_channels = out_channels
        self.conv = ModulatedConv2d(in_channels, out_channels, w_dim, kernel_size=3, rng=rng)
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.to_rgb = ModulatedConv2d(out_channels, 3, w_dim, kernel_size=1, demodulate=False, rng=rng)
        self.rgb_bias = nn.Parameter(torch.zeros(3))

    def forward(self, x: Optional[Tensor], w: Tensor) -> tuple[Tensor, Tensor]:
        if self.index == 1:
            x = self.const.expand(w.shape[0], -1, -1, -1)
        else:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.conv(x, w) + self.bias[None, :, None, None]
        x = F.leaky_relu(x, 0.2) * LRELU_GAIN
        rgb = self.to_rgb(x, w) + self.rgb_bias[None, :, None, None]
        return x, rgb


class StyleGenerator(nn.Module):
    """
    Mapping network plus a skip-architecture synthesis network with
    ``len(channels)`` layers. Layer m (1-based) works at side 2**(m+1).
    """

    def __init__(self, z_dim: int, w_dim: int, channels: list[int], mapping_layers: int = 2,
                 w_avg_decay: float = 0.995, seed: int = 0):
        super().__init__()
        rng = torch.Generator().manual_seed(seed)
        self.z_dim = z_dim
        self.w_dim = w_dim
        self.channels = list(channels)
        self.mapping_layers = mapping_layers
        self.w_avg_decay = w_avg_decay
        self.seed = seed

        self.mapping = MappingNetwork(z_dim, w_dim, mapping_layers, rng=rng)
        layers = []
        for index, out_channels in enumerate(self.channels, start=1):
            in_channels = self.channels[index - 2] if index > 1 else out_channels
            layers.append(SynthesisLayer(index, in_channels, out_channels, w_dim, rng=rng))
        self.layers = nn.ModuleList(layers)
        self.register_buffer("w_avg", torch.zeros(w_dim))
        self.trainable: frozenset[int] = frozenset(range(1, self.num_layers + 1))

    @classmethod
    def from_config(cls, config: GeneratorConfig, seed: int = 0) -> "StyleGenerator":
        return cls(
            z_dim=config.z_dim,
            w_dim=config.w_dim,
            channels=config.channels,
            mapping_layers=config.mapping_layers,
            w_avg_decay=config.w_avg_decay,
            seed=seed,
        )

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def resolution(self) -> int:
        return 2 ** (self.num_layers + 1)

    def architecture(self) -> dict:
        """ Hyperparameters needed to rebuild this generator from a checkpoint """
        return {
            "num_layers": self.num_layers,
            "z_dim": self.z_dim,
            "w_dim": self.w_dim,
            "channels": self.channels,
            "mapping_layers": self.mapping_layers,
            "w_avg_decay": self.w_avg_decay,
        }

    def map_latent(self, z: Union[Tensor, LatentCode]) -> StyleCode:
        """ Map latent codes (``[z_dim]`` or ``[batch, z_dim]``) to style codes """
        if isinstance(z, LatentCode):
            z = z.values
        if z.shape[-1] != self.z_dim:
            raise ConfigurationError(
                f"Latent has dimension {z.shape[-1]}, generator expects {self.z_dim}", "generator.z_dim"
            )
        squeeze = z.dim() == 1
        w = self.mapping(z.unsqueeze(0) if squeeze else z)
        return w.squeeze(0) if squeeze else w

    def truncate_style(self, w: StyleCode, psi: float) -> StyleCode:
        return truncate(w, self.w_avg, psi)

    @torch.no_grad()
    def update_w_avg(self, w: StyleCode) -> None:
        """ Exponential moving average of the mapped styles, called by training loops only """
        batch_mean = w.detach().reshape(-1, self.w_dim).mean(dim=0)
        self.w_avg.copy_(batch_mean.lerp(self.w_avg, self.w_avg_decay))

    def synthesize(self, w: StyleCode, capture: Iterable[int] = ()) -> SynthesisResult:
        """
        Run the synthesis network.

        Args:
            w: Style codes, ``[w_dim]`` or ``[batch, w_dim]``
            capture: Layer indices (1-based) whose activations are returned

        Returns:
            SynthesisResult with ``image`` of shape [batch, 3, side, side]
        """
        capture = set(capture)
        bad = [m for m in capture if not 1 <= m <= self.num_layers]
        if bad:
            raise ValueError(f"Capture layers {sorted(bad)} outside [1, {self.num_layers}]")

        squeeze = w.dim() == 1
        if squeeze:
            w = w.unsqueeze(0)

        features = {}
        x = None
        image = None
        for layer in self.layers:
            x, rgb = layer(x, w)
            if image is None:
                image = rgb
            else:
                image = F.interpolate(image, scale_factor=2, mode="bilinear", align_corners=False) + rgb
            if layer.index in capture:
                features[layer.index] = x

        image = image.clamp(-1.0, 1.0)
        if squeeze:
            image = image.squeeze(0)
            features = {m: f.squeeze(0) for m, f in features.items()}
        return SynthesisResult(image=image, features=features)

    def forward(self, z: Tensor, psi: float = 1.0) -> Tensor:
        w = self.map_latent(z)
        if psi != 1.0:
            w = self.truncate_style(w, psi)
        return self.synthesize(w).image

    def layer_parameters(self, index: int) -> list[nn.Parameter]:
        return list(self.layers[index - 1].parameters())

    def set_trainable_layers(self, layers: Iterable[int], mapping: bool = False) -> None:
        """
        Restrict gradient flow to the given synthesis layers.

        Parameters outside the set get ``requires_grad=False`` so optimizers
        built over ``trainable_parameters`` never touch them.
        """
        layers = frozenset(layers)
        bad = [m for m in layers if not 1 <= m <= self.num_layers]
        if bad:
            raise ValueError(f"Trainable layers {sorted(bad)} outside [1, {self.num_layers}]")

        self.mapping.requires_grad_(mapping)
        for layer in self.layers:
            layer.requires_grad_(layer.index in layers)
        self.trainable = layers
        LOG.debug("Generator trainable layers: %s (mapping %s)", sorted(layers), mapping)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]


def snapshot_frozen(generator: StyleGenerator) -> StyleGenerator:
    """ Deep copy with every parameter frozen; later steps on ``generator`` do not reach it """
    frozen = copy.deepcopy(generator)
    frozen.requires_grad_(False)
    frozen.trainable = frozenset()
    frozen.eval()
    return frozen


def set_trainable_layers(generator: StyleGenerator, layers: Iterable[int]) -> None:
    generator.set_trainable_layers(layers)
