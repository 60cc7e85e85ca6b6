""" Label-synthesis heads on top of the generator's intermediate features """

import logging
import math

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import torch
import torch.nn.functional as F

from torch import Tensor, nn

from labelfactory.configuration import ConfigurationError, FactoryConfig
from labelfactory.labels.decode import decode
from labelfactory.labels.losses import PredictionTriplet, detection_loss_parts
from labelfactory.labels.targets import LabelSet, splat_targets, stack_targets
from labelfactory.networks.checkpoint import load_checkpoint, save_checkpoint
from labelfactory.networks.generator import LatentCode, StyleGenerator, stack_latents

LOG = logging.getLogger(__name__)

# Heatmap logits start at sigmoid(-2.19) ~ 0.1, the usual prior for sparse keypoints
HEATMAP_BIAS_INIT = -math.log((1 - 0.1) / 0.1)


def _branch(in_channels: int, hidden: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, hidden, kernel_size=3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(hidden, out_channels, kernel_size=1),
    )


class LabelHead(nn.Module):
    """ Heatmap, offset and size branches over one shared feature tensor """

    def __init__(self, in_channels: int, num_classes: int, hidden: int = 64, stride: int = 1,
                 capture_layers: Sequence[int] = ()):
        super().__init__()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.hidden = hidden
        self.stride = stride
        self.capture_layers = list(capture_layers)

        self.heatmap = _branch(in_channels, hidden, num_classes)
        self.offset = _branch(in_channels, hidden, 2)
        self.size = _branch(in_channels, hidden, 2)
        nn.init.constant_(self.heatmap[-1].bias, HEATMAP_BIAS_INIT)

    def architecture(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "hidden": self.hidden,
            "stride": self.stride,
            "capture_layers": self.capture_layers,
        }

    def forward(self, features: Tensor) -> PredictionTriplet:
        return PredictionTriplet(
            heatmap=torch.sigmoid(self.heatmap(features)),
            offsets=self.offset(features),
            sizes=self.size(features),
        )


@dataclass
class LabelHeadResult:
    head: LabelHead
    trace: list[float] = field(default_factory=list)


def concat_upsampled(features: Iterable[Tensor], side: int) -> Tensor:
    """ Bilinearly resize every [B, C_m, s_m, s_m] map to ``side`` and concatenate along channels """
    resized = [
        f if f.shape[-1] == side else F.interpolate(f, size=(side, side), mode="bilinear", align_corners=False)
        for f in features
    ]
    return torch.cat(resized, dim=1)


def _as_latent_batch(z: Union[Tensor, LatentCode, Sequence[LatentCode]]) -> Tensor:
    if isinstance(z, LatentCode):
        return z.values.unsqueeze(0)
    if isinstance(z, (list, tuple)):
        return stack_latents(z)
    return z if z.dim() == 2 else z.unsqueeze(0)


def synthesize_with_features(generator: StyleGenerator, z: Union[Tensor, LatentCode, Sequence[LatentCode]],
                             capture_layers: Sequence[int], stride: int = 1,
                             psi: float = 1.0) -> tuple[Tensor, Tensor]:
    """
    Images plus the label-branch feature tensor for a batch of latents.

    Returns:
        (images [B, 3, side, side], features [B, sum C_m, side/stride, side/stride])

    Raises:
        ConfigurationError: If a capture layer does not exist in ``generator``
    """
    missing = [m for m in capture_layers if not 1 <= m <= generator.num_layers]
    if missing or not capture_layers:
        raise ConfigurationError(
            f"Capture layers {sorted(missing) or '[]'} not available in a {generator.num_layers}-layer generator",
            "label.capture_layers"
        )
    side = generator.resolution // stride
    w = generator.map_latent(_as_latent_batch(z))
    if psi != 1.0:
        w = generator.truncate_style(w, psi)
    result = generator.synthesize(w, capture=capture_layers)
    features = concat_upsampled([result.features[m] for m in sorted(capture_layers)], side)
    return result.image, features


def extract_features(generator: StyleGenerator, z: Union[Tensor, LatentCode, Sequence[LatentCode]],
                     capture_layers: Sequence[int], stride: int = 1, psi: float = 1.0) -> Tensor:
    with torch.no_grad():
        return synthesize_with_features(generator, z, capture_layers, stride, psi)[1]


def feature_channels(generator: StyleGenerator, capture_layers: Sequence[int]) -> int:
    return sum(generator.channels[m - 1] for m in capture_layers)


def build_optimizer(params, config: FactoryConfig) -> torch.optim.Optimizer:
    label = config.label
    if label.optimizer == "adam":
        return torch.optim.Adam(params, lr=label.lr, weight_decay=label.weight_decay)
    return torch.optim.SGD(params, lr=label.lr, momentum=label.momentum, weight_decay=label.weight_decay)


def train_label_head(generator: StyleGenerator, annotated: Sequence[tuple[LatentCode, LabelSet]],
                     config: FactoryConfig, seed: int = 0) -> LabelHeadResult:
    """
    Fit the label heads on a handful of annotated synthesized samples.

    The generator stays frozen, so its features are computed once and reused
    for every iteration; each step uses the full annotated set.

    Raises:
        ValueError: If ``annotated`` is empty or references an unknown class
    """
    if not annotated:
        raise ValueError("Label head training needs at least one annotated sample")
    label = config.label
    side = generator.resolution
    for code, labels in annotated:
        for box in labels:
            if not 0 <= box.class_id < config.num_classes:
                raise ValueError(
                    f"Annotation for seed {code.seed} has class_id {box.class_id}, "
                    f"expected [0, {config.num_classes})"
                )

    capture_layers = config.capture_layers()
    features = extract_features(generator, [code for code, _ in annotated], capture_layers,
                                label.stride, config.psi)
    targets = stack_targets([
        splat_targets(labels, side, side, label.stride, config.num_classes, label.min_overlap)
        for _, labels in annotated
    ])

    torch.manual_seed(seed)
    head = LabelHead(features.shape[1], config.num_classes, label.hidden_channels, label.stride, capture_layers)
    optimizer = build_optimizer(head.parameters(), config)

    LOG.info("Training label head on %d samples for %d iterations (%s, lr %g)",
             len(annotated), label.iters, label.optimizer, label.lr)
    trace = []
    for iteration in range(label.iters):
        parts = detection_loss_parts(head(features), targets, label.focal_alpha, label.focal_beta)
        loss = parts.total(label.lambda_off, label.lambda_size, iteration)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        trace.append(float(loss.detach()))
        if config.adapt.log_every and iteration % config.adapt.log_every == 0:
            LOG.debug("label head %d/%d loss=%.4f (k=%.4f off=%.4f size=%.4f)", iteration, label.iters,
                      trace[-1], float(parts.heatmap), float(parts.offset), float(parts.size))

    head.eval()
    return LabelHeadResult(head=head, trace=trace)


def predict_labels(generator: StyleGenerator, head: LabelHead, z: Union[Tensor, LatentCode, Sequence[LatentCode]],
                   psi: float = 1.0, score_thresh: float = 0.6, max_dets: int = 32) -> list[LabelSet]:
    """ Features -> heads -> decode, one LabelSet per latent """
    with torch.no_grad():
        features = extract_features(generator, z, head.capture_layers, head.stride, psi)
        pred = head(features)
    side = generator.resolution
    return [
        [box for box, _ in decode(pred[i], head.stride, max_dets, score_thresh, image_size=(side, side))]
        for i in range(features.shape[0])
    ]


def save_label_head(head: LabelHead, path: Path) -> None:
    save_checkpoint(path, dict(head.state_dict()), "label_head", head.architecture())


def load_label_head(path: Path) -> LabelHead:
    meta, state = load_checkpoint(path, kind="label_head")
    head = LabelHead(meta["in_channels"], meta["num_classes"], meta["hidden"], meta["stride"],
                     meta["capture_layers"])
    head.load_state_dict(state)
    head.eval()
    return head
