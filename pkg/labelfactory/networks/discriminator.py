""" Image-level and patch-level discriminators sharing one convolutional trunk """

import logging
import math

from enum import Enum
from typing import Optional

import torch
import torch.nn.functional as F

from torch import Tensor, nn

from labelfactory.configuration import DiscriminatorConfig, GeneratorConfig
from labelfactory.networks.generator import LRELU_GAIN, EqualLinear

LOG = logging.getLogger(__name__)


class Mode(Enum):
    """ Which discriminator view scores a batch """
    IMAGE_LEVEL = "image"
    PATCH_LEVEL = "patch"


class EqualConv2d(nn.Module):
    """ Convolution with equalized learning rate """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: Optional[torch.Generator] = None):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size, generator=rng))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.weight_gain = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        self.padding = kernel_size // 2

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight * self.weight_gain, self.bias, padding=self.padding)


class DiscriminatorBlock(nn.Module):
    """ conv3x3 -> lrelu -> 2x average-pool """

    def __init__(self, in_channels: int, out_channels: int, rng: Optional[torch.Generator] = None):
        super().__init__()
        self.conv = EqualConv2d(in_channels, out_channels, 3, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        x = F.leaky_relu(self.conv(x), 0.2) * LRELU_GAIN
        return F.avg_pool2d(x, 2)


def trunk_receptive_fields(n_blocks: int) -> list[int]:
    """ Receptive field (pixels) of one output cell after each trunk block """
    fields = []
    rf, jump = 1, 1
    for _ in range(n_blocks):
        rf += 2 * jump      # 3x3 conv
        rf += jump          # 2x2 pool
        jump *= 2
        fields.append(rf)
    return fields


def default_patch_tap(resolution: int, n_blocks: int) -> int:
    """ Trunk block whose receptive field is closest to a quarter of the image side """
    target = resolution / 4
    fields = trunk_receptive_fields(n_blocks)
    # ties go to the deeper block
    return min(range(n_blocks, 0, -1), key=lambda t: abs(fields[t - 1] - target))


class DualDiscriminator(nn.Module):
    """
    Shared trunk (resolution -> 4) with two heads:

    - image head: linear layer over the final 4x4 activation, one logit per image
    - patch head: 1x1 convolution over the activation of block ``patch_tap_layer``,
      one logit per grid cell

    The patch head reads the same trunk tensors as the image head, so the
    patch discriminator is a prefix of the image discriminator.
    """

    def __init__(self, resolution: int, channels: list[int], patch_tap_layer: Optional[int] = None,
                 seed: int = 0):
        super().__init__()
        n_blocks = int(math.log2(resolution)) - 2
        if 2 ** (n_blocks + 2) != resolution or n_blocks < 1:
            raise ValueError(f"Resolution must be a power of two >= 8, got {resolution}")
        if len(channels) != n_blocks:
            raise ValueError(f"Expected {n_blocks} trunk widths, got {len(channels)}")

        rng = torch.Generator().manual_seed(seed)
        self.resolution = resolution
        self.channels = list(channels)
        self.patch_tap_layer = patch_tap_layer or default_patch_tap(resolution, n_blocks)
        if not 1 <= self.patch_tap_layer <= n_blocks:
            raise ValueError(f"Patch tap must lie in [1, {n_blocks}], got {self.patch_tap_layer}")

        self.from_rgb = EqualConv2d(3, channels[0], 1, rng=rng)
        widths = self.channels + [self.channels[-1]]
        self.blocks = nn.ModuleList(
            DiscriminatorBlock(widths[i], widths[i + 1], rng=rng) for i in range(n_blocks)
        )
        self.image_head = EqualLinear(widths[-1] * 16, 1, rng=rng)
        self.patch_head = EqualConv2d(widths[self.patch_tap_layer], 1, 1, rng=rng)

    @classmethod
    def from_config(cls, config: DiscriminatorConfig, generator_config: GeneratorConfig,
                    seed: int = 0) -> "DualDiscriminator":
        channels = config.channels or list(reversed(generator_config.channels[:-1]))
        return cls(generator_config.resolution, channels, config.patch_tap_layer, seed=seed)

    @property
    def patch_grid(self) -> tuple[int, int]:
        side = self.resolution // 2 ** self.patch_tap_layer
        return side, side

    def architecture(self) -> dict:
        return {
            "resolution": self.resolution,
            "channels": self.channels,
            "patch_tap_layer": self.patch_tap_layer,
        }

    def _check(self, images: Tensor) -> Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.dim() != 4 or images.shape[1] != 3 or tuple(images.shape[-2:]) != (self.resolution,) * 2:
            raise ValueError(
                f"Expected images of shape [batch, 3, {self.resolution}, {self.resolution}], "
                f"got {list(images.shape)}"
            )
        return images

    def _trunk(self, images: Tensor, depth: int) -> Tensor:
        x = F.leaky_relu(self.from_rgb(images), 0.2) * LRELU_GAIN
        for block in self.blocks[:depth]:
            x = block(x)
        return x

    def score_full(self, images: Tensor) -> Tensor:
        """ One logit per image, shape [batch] """
        images = self._check(images)
        x = self._trunk(images, len(self.blocks))
        return self.image_head(x.flatten(1)).squeeze(1)

    def score_patches(self, images: Tensor) -> Tensor:
        """ Logit grid per image, shape [batch, h_p, w_p] """
        images = self._check(images)
        x = self._trunk(images, self.patch_tap_layer)
        return self.patch_head(x).squeeze(1)

    def score(self, images: Tensor, mode: Mode) -> Tensor:
        if mode is Mode.IMAGE_LEVEL:
            return self.score_full(images)
        return self.score_patches(images)

    def final_parameters(self) -> list[nn.Parameter]:
        return list(self.image_head.parameters()) + list(self.patch_head.parameters())

    def freeze_all_but_final(self) -> None:
        """ Freeze the shared trunk; only the two heads keep training """
        self.requires_grad_(False)
        for param in self.final_parameters():
            param.requires_grad_(True)
        LOG.debug("Discriminator trunk frozen, heads trainable")

    def unfreeze_all(self) -> None:
        self.requires_grad_(True)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]


def freeze_all_but_final(discriminator: DualDiscriminator) -> None:
    discriminator.freeze_all_but_final()


def augment_images(images: Tensor, rng: torch.Generator) -> Tensor:
    """
    Differentiable horizontal flip plus brightness / saturation / contrast jitter.
    Draws one set of random factors per image from ``rng``.
    """
    batch = images.shape[0]
    dtype = images.dtype

    flip = torch.rand(batch, generator=rng) < 0.5
    images = torch.where(flip[:, None, None, None].to(images.device), images.flip(-1), images)

    brightness = (torch.rand(batch, generator=rng) - 0.5) * 0.4
    images = images + brightness.to(dtype)[:, None, None, None]

    saturation = torch.rand(batch, generator=rng) + 0.5
    gray = images.mean(dim=1, keepdim=True)
    images = gray + (images - gray) * saturation.to(dtype)[:, None, None, None]

    contrast = torch.rand(batch, generator=rng) + 0.5
    mean = images.mean(dim=[1, 2, 3], keepdim=True)
    images = mean + (images - mean) * contrast.to(dtype)[:, None, None, None]
    return images
